"""Network bundle, parameter snapshots, interpolation algebra, checkpoints."""
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from lumisurf.meta import MetaConfig, reptile_update
from lumisurf.snapshots import (
    NetworkConfig,
    Networks,
    ParameterSnapshot,
    build_networks,
    config_hash,
    load_checkpoint,
    save_checkpoint,
    state_digest,
)


def _tiny_config() -> NetworkConfig:
    return NetworkConfig(
        sdf_depth=2, sdf_width=8, feature_dim=4,
        encoder_widths=(4, 8, 4), decoder_widths=(8, 16),
        aggregator_hidden=8, aggregator_layers=2,
    )


# ---------------------------------------------------------------------------
# NetworkConfig / Networks


def test_rgb_mode_feature_dim_is_three():
    cfg = NetworkConfig(rgb_features=True)
    assert cfg.effective_feature_dim == 3
    assert NetworkConfig().effective_feature_dim == 16


def test_decoder_divisor_by_variant():
    assert Networks(_tiny_config()).decoder_divisor == 4  # 2 stages, floor 4
    assert Networks(NetworkConfig(rgb_features=True, sdf_width=8, sdf_depth=2)).decoder_divisor == 1
    full = NetworkConfig()
    assert 2 ** len(full.decoder_widths) == 8


def test_parameter_split_is_a_partition():
    nets = build_networks(_tiny_config(), seed=0)
    shape_ids = {id(p) for p in nets.shape_parameters()}
    app_ids = {id(p) for p in nets.appearance_parameters()}
    all_ids = {id(p) for p in nets.parameters()}
    assert shape_ids.isdisjoint(app_ids)
    assert shape_ids | app_ids == all_ids


def test_rgb_mode_encode_is_identity():
    nets = build_networks(NetworkConfig(rgb_features=True, sdf_width=8, sdf_depth=2), seed=0)
    imgs = torch.rand(2, 8, 8, 3)
    assert torch.equal(nets.encode_images(imgs), imgs)


def test_codec_mode_encode_shapes():
    nets = build_networks(_tiny_config(), seed=0)
    feats = nets.encode_images(torch.rand(2, 8, 8, 3))
    assert feats.shape == (2, 8, 8, 4)
    out = nets.decode_features(feats)
    assert out.shape == (2, 8, 8, 3)


def test_build_networks_seeded_reproducible():
    a = build_networks(_tiny_config(), seed=3)
    b = build_networks(_tiny_config(), seed=3)
    assert state_digest(a) == state_digest(b)


# ---------------------------------------------------------------------------
# ParameterSnapshot


def test_snapshot_capture_is_detached_copy():
    nets = build_networks(_tiny_config(), seed=0)
    snap = ParameterSnapshot.capture(nets)
    before = snap.tensors["sdf.layers.0.weight"].clone()
    with torch.no_grad():
        next(nets.sdf.parameters()).add_(1.0)
    assert torch.equal(snap.tensors["sdf.layers.0.weight"], before)


def test_snapshot_apply_round_trip():
    nets = build_networks(_tiny_config(), seed=0)
    snap = ParameterSnapshot.capture(nets)
    with torch.no_grad():
        for p in nets.parameters():
            p.add_(0.5)
    assert state_digest(nets) != snap_digest(snap)
    snap.apply_to(nets)
    assert state_digest(nets) == snap_digest(snap)


def snap_digest(snap: ParameterSnapshot) -> str:
    class Holder(torch.nn.Module):
        def state_dict(self, *a, **k):
            return snap.tensors

    return state_digest(Holder())


def test_lerp_zero_keeps_init():
    a = ParameterSnapshot({"w": torch.tensor([0.0, 2.0])})
    b = ParameterSnapshot({"w": torch.tensor([10.0, -2.0])})
    out = reptile_update(a, b, 0.0)
    assert torch.equal(out.tensors["w"], a.tensors["w"])


def test_lerp_one_reaches_adapted():
    a = ParameterSnapshot({"w": torch.tensor([0.0, 2.0])})
    b = ParameterSnapshot({"w": torch.tensor([10.0, -2.0])})
    out = reptile_update(a, b, 1.0)
    assert torch.equal(out.tensors["w"], b.tensors["w"])


def test_lerp_scalar_oracle():
    # 0 -> 10 with step 0.1 lands on 1.0
    a = ParameterSnapshot({"w": torch.tensor([0.0])})
    b = ParameterSnapshot({"w": torch.tensor([10.0])})
    out = reptile_update(a, b, 0.1)
    assert math.isclose(float(out.tensors["w"]), 1.0, rel_tol=1e-6)


def test_lerp_mismatched_keys_raise():
    a = ParameterSnapshot({"w": torch.zeros(2)})
    b = ParameterSnapshot({"v": torch.zeros(2)})
    with pytest.raises(ValueError):
        a.lerp(b, 0.5)


def test_lerp_integer_tensors_follow_new_state():
    # counters (batch-norm batch counts) are not interpolable
    a = ParameterSnapshot({"n": torch.tensor(10, dtype=torch.int64)})
    b = ParameterSnapshot({"n": torch.tensor(30, dtype=torch.int64)})
    assert int(a.lerp(b, 0.25).tensors["n"]) == 30


@settings(max_examples=25, deadline=None)
@given(
    beta=st.floats(min_value=0.0, max_value=1.0),
    gamma=st.floats(min_value=0.0, max_value=1.0),
    x0=st.floats(min_value=-5, max_value=5),
    xm=st.floats(min_value=-5, max_value=5),
)
def test_lerp_composition_law(beta, gamma, x0, xm):
    """Stepping beta then gamma toward the same target equals one step of
    beta + gamma - beta*gamma."""
    a = ParameterSnapshot({"w": torch.tensor([x0], dtype=torch.float64)})
    b = ParameterSnapshot({"w": torch.tensor([xm], dtype=torch.float64)})
    twice = reptile_update(reptile_update(a, b, beta), b, gamma)
    once = reptile_update(a, b, beta + gamma - beta * gamma)
    assert torch.allclose(twice.tensors["w"], once.tensors["w"], atol=1e-12)


def test_l2_distance_matches_hand_value():
    a = ParameterSnapshot({"w": torch.zeros(3), "v": torch.zeros(2)})
    b = ParameterSnapshot({"w": torch.tensor([3.0, 0.0, 0.0]), "v": torch.tensor([0.0, 4.0])})
    assert math.isclose(a.l2_distance(b), 5.0, rel_tol=1e-6)


def test_snapshot_finite_detects_nan():
    good = ParameterSnapshot({"w": torch.zeros(2)})
    bad = ParameterSnapshot({"w": torch.tensor([0.0, float("nan")])})
    assert good.finite()
    assert not bad.finite()


# ---------------------------------------------------------------------------
# digests / checkpoints


def test_state_digest_sensitive_to_single_change():
    nets = build_networks(_tiny_config(), seed=0)
    d0 = state_digest(nets)
    assert state_digest(nets) == d0  # stable across calls
    with torch.no_grad():
        next(nets.parameters()).view(-1)[0] += 1e-7
    assert state_digest(nets) != d0


def test_checkpoint_round_trip(tmp_path):
    nets = build_networks(_tiny_config(), seed=1)
    digest = state_digest(nets)
    save_checkpoint(tmp_path / "c.pt", nets, iteration=12, wall_seconds=3.5, cfg_hash="abc")
    fresh = build_networks(_tiny_config(), seed=2)
    assert state_digest(fresh) != digest
    payload = load_checkpoint(tmp_path / "c.pt", fresh)
    assert state_digest(fresh) == digest
    assert payload["iteration"] == 12
    assert payload["config_hash"] == "abc"
    assert payload["network_config"]["sdf_width"] == 8


def test_checkpoint_digest_mismatch_detected(tmp_path):
    nets = build_networks(_tiny_config(), seed=1)
    save_checkpoint(tmp_path / "c.pt", nets, 1, 0.0, "h")
    payload = torch.load(tmp_path / "c.pt", weights_only=False)
    payload["digest"] = "0" * 64
    torch.save(payload, tmp_path / "c.pt")
    with pytest.raises(RuntimeError, match="digest"):
        load_checkpoint(tmp_path / "c.pt", build_networks(_tiny_config(), seed=1))


def test_config_hash_key_order_invariant():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


# ---------------------------------------------------------------------------
# MetaConfig validation / schedule


def test_meta_config_validates_ranges():
    with pytest.raises(ValueError):
        MetaConfig(inner_iterations=0)
    with pytest.raises(ValueError):
        MetaConfig(beta=0.0)
    with pytest.raises(ValueError):
        MetaConfig(beta=1.5)


def test_beta_decay_endpoints():
    cfg = MetaConfig(outer_iterations=11, beta=0.1, beta_final=0.02)
    assert math.isclose(cfg.beta_at(0), 0.1)
    assert math.isclose(cfg.beta_at(10), 0.02)
    assert cfg.beta_at(5) < 0.1
    flat = MetaConfig(outer_iterations=11, beta=0.1)
    assert flat.beta_at(7) == 0.1
