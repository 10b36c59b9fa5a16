"""Neural lumigraph rendering: SIREN SDF geometry, per-view feature codec,
occlusion-aware view aggregation, meta-learned initializations, and mesh-based
real-time export."""

__version__ = "0.1.0"
