"""Unit tests for config validation, radius schedules, and the encoder stack."""

import numpy as np
import pytest

from nftvg.errors import FormatError
from nftvg.model import (
    CHECKPOINT_MAGIC,
    GroundingModel,
    ModelConfig,
    RadiusSchedule,
    apply_checkpoint,
    derive_schedule,
    load_checkpoint,
    save_checkpoint,
)

TINY = dict(
    d_model=16, heads=2, enc_layers=1, cross_layers=2, anchor_scales=(2, 4),
    vocab_size=8, feature_dim=5, max_video_len=16, max_text_len=8,
)


def tiny_model(seed=0, **overrides):
    return GroundingModel(ModelConfig(**{**TINY, **overrides}), seed=seed)


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(**{**TINY, "d_model": 10, "heads": 4})


def test_config_rejects_nonincreasing_scales():
    with pytest.raises(ValueError, match="strictly increasing"):
        ModelConfig(**{**TINY, "anchor_scales": (4, 4)})


def test_config_rejects_bad_schedule_type():
    with pytest.raises(ValueError, match="schedule_type"):
        ModelConfig(**{**TINY, "schedule_type": "pyramid"})


def test_config_rejects_wrong_radii_length():
    with pytest.raises(ValueError, match="window_radii"):
        ModelConfig(**{**TINY, "window_radii": (4,)})


def test_schedule_eight_scales_four_layers():
    cfg = ModelConfig(
        **{**TINY, "cross_layers": 4, "anchor_scales": (4, 8, 16, 32, 48, 64, 80, 96)}
    )
    sched = derive_schedule(cfg)
    assert sched.radii == [96, 64, 32, 8]
    assert sched.per_layer_scales == [[80, 96], [48, 64], [16, 32], [4, 8]]


def test_schedule_four_scales_four_layers():
    cfg = ModelConfig(**{**TINY, "cross_layers": 4, "anchor_scales": (8, 12, 16, 20)})
    sched = derive_schedule(cfg)
    assert sched.radii == [20, 16, 12, 8]
    assert sched.per_layer_scales == [[20], [16], [12], [8]]


def test_schedule_increase_reverses_allocation():
    cfg = ModelConfig(
        **{
            **TINY,
            "cross_layers": 4,
            "anchor_scales": (4, 8, 16, 32, 48, 64, 80, 96),
            "schedule_type": "increase",
        }
    )
    sched = derive_schedule(cfg)
    assert sched.radii == [8, 32, 64, 96]
    # invariant kept under reversal: radius is the max of the layer's own scales
    assert all(r == max(s) for r, s in zip(sched.radii, sched.per_layer_scales))


def test_schedule_fixed_uses_global_max():
    cfg = ModelConfig(
        **{**TINY, "cross_layers": 2, "anchor_scales": (2, 4), "schedule_type": "fixed"}
    )
    sched = derive_schedule(cfg)
    assert sched.radii == [4, 4]
    assert sched.per_layer_scales == [[4], [2]]


def test_schedule_override_spreads_scales():
    cfg = ModelConfig(
        **{**TINY, "cross_layers": 4, "anchor_scales": (4, 8), "window_radii": (8, 8, 4, 4)}
    )
    sched = derive_schedule(cfg)
    assert sched.radii == [8, 8, 4, 4]
    assert sched.per_layer_scales == [[8], [8], [4], [4]]


def test_schedule_override_must_match_type():
    with pytest.raises(ValueError, match="decrease"):
        derive_schedule(
            ModelConfig(**{**TINY, "cross_layers": 2, "window_radii": (2, 4)})
        )
    with pytest.raises(ValueError, match="fixed"):
        derive_schedule(
            ModelConfig(
                **{**TINY, "cross_layers": 2, "window_radii": (4, 2), "schedule_type": "fixed"}
            )
        )


def test_schedule_underivable_without_override():
    with pytest.raises(ValueError, match="window_radii"):
        derive_schedule(ModelConfig(**{**TINY, "cross_layers": 3, "anchor_scales": (2, 4)}))


def test_every_scale_owned_exactly_once():
    cfg = ModelConfig(
        **{**TINY, "cross_layers": 4, "anchor_scales": (4, 8), "window_radii": (8, 8, 4, 4)}
    )
    sched = derive_schedule(cfg)
    owners = [sched.owning_layer(s) for s in (4, 8)]
    assert owners == [3, 1]  # deepest layer holding each scale
    counts = {s: sum(s in sched.owned_scales(j) for j in range(4)) for s in (4, 8)}
    assert counts == {4: 1, 8: 1}
    assert sched.head_slots() == 1  # widest per-layer owned subset


def test_radius_schedule_validation():
    with pytest.raises(ValueError, match="one entry per layer"):
        RadiusSchedule([4], [[4], [2]], "decrease")
    with pytest.raises(ValueError, match=">= 0"):
        RadiusSchedule([-1], [[4]], "decrease")


def test_model_shapes_and_layer_count():
    m = tiny_model()
    rng = np.random.default_rng(0)
    outs = m.forward(rng.normal(size=(10, 5)), [1, 2, 3])
    assert len(outs) == 2
    for lo in outs:
        assert lo.v.shape == (10, 16)
        assert lo.q.shape == (3, 16)
        assert lo.v_tilde.shape == (10, 16)
        assert lo.v_hat.shape == (10, 32)


def test_encode_video_capacity_error():
    m = tiny_model()
    with pytest.raises(ValueError, match="capacity"):
        m.encode_video(np.zeros((17, 5)))


def test_encode_video_rejects_nonfinite():
    m = tiny_model()
    bad = np.zeros((4, 5))
    bad[2, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        m.encode_video(bad)


def test_encode_video_rejects_wrong_width():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.encode_video(np.zeros((4, 6)))


def test_encode_text_vocabulary_error():
    m = tiny_model()
    with pytest.raises(ValueError, match="vocabulary"):
        m.encode_text([0, 8])


def test_encode_text_capacity_error():
    m = tiny_model()
    with pytest.raises(ValueError, match="capacity"):
        m.encode_text(list(range(8)) + [0])


def test_positional_embedding_breaks_permutation_symmetry():
    m = tiny_model()
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(6, 5))
    a = m.encode_video(feats).data
    b = m.encode_video(feats[::-1].copy()).data
    assert np.max(np.abs(a - b[::-1])) > 1e-6


def test_text_grad_hits_used_embedding_rows_only():
    from nftvg.numerics import tsum

    m = tiny_model()
    m.zero_grad()
    out = m.encode_text([1, 3])
    tsum(out).backward()
    g = m.params["text_embed"].grad
    used = np.abs(g).sum(axis=1) > 0
    assert used[1] and used[3]
    assert not used[[0, 2, 4, 5, 6, 7]].any()


def test_forward_deterministic():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(8, 5))
    a = tiny_model(seed=5).forward(feats, [1, 2])[-1].v_hat.data
    b = tiny_model(seed=5).forward(feats, [1, 2])[-1].v_hat.data
    assert np.array_equal(a, b)


def test_seed_changes_parameters():
    a = tiny_model(seed=0).params["video_in.w"].data
    b = tiny_model(seed=1).params["video_in.w"].data
    assert not np.array_equal(a, b)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = tiny_model(seed=7)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, m.params)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(m.params)
    for name, arr in loaded.items():
        assert np.array_equal(arr, m.params[name].data)

    m2 = tiny_model(seed=8)
    apply_checkpoint(m2, loaded)
    feats = np.random.default_rng(3).normal(size=(6, 5))
    assert np.array_equal(
        m.forward(feats, [1])[-1].v_hat.data, m2.forward(feats, [1])[-1].v_hat.data
    )


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTFMT" + b"\x00" * 10)
    with pytest.raises(FormatError) as exc:
        load_checkpoint(str(path))
    assert exc.value.offset == 0


def test_checkpoint_trailing_bytes(tmp_path):
    m = tiny_model()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, m.params)
    with open(path, "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_truncated_block(tmp_path):
    m = tiny_model()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, m.params)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-4])
    with pytest.raises(FormatError, match="truncated block"):
        load_checkpoint(path)


def test_apply_checkpoint_name_mismatch(tmp_path):
    m = tiny_model()
    loaded = {name: t.data for name, t in m.params.items()}
    loaded.pop("video_in.w")
    with pytest.raises(ValueError, match="video_in.w"):
        apply_checkpoint(m, loaded)


def test_apply_checkpoint_shape_mismatch():
    m = tiny_model()
    loaded = {name: t.data.copy() for name, t in m.params.items()}
    loaded["video_in.w"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="video_in.w"):
        apply_checkpoint(m, loaded)


def test_checkpoint_magic_value():
    assert CHECKPOINT_MAGIC == b"NFTVG1"


def test_parameter_count_matches_sum():
    m = tiny_model()
    assert m.parameter_count() == sum(t.data.size for t in m.params.values())
