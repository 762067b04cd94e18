import pytest
import torch

from videdit.attention import (
    AttentionContext,
    AttentionMode,
    cross_frame_attend,
    default_attention_modes,
    inject_cross_attention,
    record_cross_attention,
    uniform_attention_modes,
)

from oracles import dense_masked_attention, mode_mask

ALL_MODES = list(AttentionMode)


def random_weights(dim, gen):
    return tuple(torch.randn(dim, dim, generator=gen) / dim**0.5 for _ in range(4))


def random_instance(gen, num_frames=None, tokens=None, dim=None, heads=None):
    f = num_frames or int(torch.randint(1, 5, (1,), generator=gen))
    n = tokens or int(torch.randint(1, 17, (1,), generator=gen))
    d = dim or int(torch.randint(1, 5, (1,), generator=gen)) * 2
    h = heads or (2 if d % 2 == 0 and torch.rand(1, generator=gen) > 0.5 else 1)
    feats = torch.randn(f, n, d, generator=gen)
    return feats, random_weights(d, gen), h


class TestCrossFrameAttend:
    def test_matches_masked_dense_oracle(self):
        gen = torch.Generator().manual_seed(10)
        for _ in range(15):
            feats, weights, heads = random_instance(gen)
            for mode in ALL_MODES:
                got = cross_frame_attend(feats, mode, *weights, heads=heads)
                mask = mode_mask(mode, feats.shape[0], feats.shape[1])
                want = dense_masked_attention(feats, mask, *weights, heads=heads)
                assert (got.numpy() - want).max() <= 1e-5, mode

    def test_single_frame_all_modes_equal_self(self):
        gen = torch.Generator().manual_seed(11)
        feats, weights, heads = random_instance(gen, num_frames=1, tokens=12, dim=8)
        base = cross_frame_attend(feats, AttentionMode.SELF, *weights, heads=heads)
        for mode in ALL_MODES:
            out = cross_frame_attend(feats, mode, *weights, heads=heads)
            assert (out - base).abs().max() <= 1e-6

    def test_identical_frames_st_equals_self(self):
        gen = torch.Generator().manual_seed(12)
        frame = torch.randn(1, 10, 8, generator=gen)
        weights = random_weights(8, gen)
        video = frame.expand(5, 10, 8).contiguous()
        st = cross_frame_attend(video, AttentionMode.ST, *weights, heads=2)
        self_out = cross_frame_attend(video, AttentionMode.SELF, *weights, heads=2)
        assert (st - self_out).abs().max() <= 1e-5

    def test_duplicated_keys_invariance_two_frames(self):
        # Brute-force check of the softmax fact behind SC's frame-1 rule:
        # attending k copies of the same keys equals attending one copy.
        gen = torch.Generator().manual_seed(13)
        for _ in range(10):
            feats = torch.randn(2, 6, 4, generator=gen)
            feats[1] = feats[0]
            weights = random_weights(4, gen)
            # frame 1 under SC sees concat(frame0, frame0); SELF sees one copy
            sc = cross_frame_attend(feats, AttentionMode.SC, *weights)
            self_out = cross_frame_attend(feats, AttentionMode.SELF, *weights)
            assert (sc[1] - self_out[1]).abs().max() <= 1e-5

    def test_sc_causality(self):
        gen = torch.Generator().manual_seed(14)
        feats, weights, heads = random_instance(gen, num_frames=4, tokens=8, dim=8)
        base = cross_frame_attend(feats, AttentionMode.SC, *weights, heads=heads)
        for j in range(1, 4):
            bumped = feats.clone()
            bumped[j] += torch.randn(8, 8, generator=gen)
            out = cross_frame_attend(bumped, AttentionMode.SC, *weights, heads=heads)
            assert (out[:j] - base[:j]).abs().max() <= 1e-6

    def test_st_bidirectionality(self):
        gen = torch.Generator().manual_seed(15)
        feats, weights, heads = random_instance(gen, num_frames=4, tokens=8, dim=8)
        bumped = feats.clone()
        bumped[3] += torch.randn(8, 8, generator=gen)
        base = cross_frame_attend(feats, AttentionMode.ST, *weights, heads=heads)
        out = cross_frame_attend(bumped, AttentionMode.ST, *weights, heads=heads)
        assert (out[0] - base[0]).abs().max() > 1e-3

    def test_temporal_only_locality(self):
        gen = torch.Generator().manual_seed(16)
        feats, weights, heads = random_instance(gen, num_frames=3, tokens=6, dim=8)
        base = cross_frame_attend(feats, AttentionMode.TEMPORAL_ONLY, *weights, heads=heads)
        bumped = feats.clone()
        bumped[1, 2] += 1.0
        out = cross_frame_attend(bumped, AttentionMode.TEMPORAL_ONLY, *weights, heads=heads)
        unchanged = [n for n in range(6) if n != 2]
        assert (out[:, unchanged] - base[:, unchanged]).abs().max() <= 1e-6

    def test_pure_in_weights(self):
        gen = torch.Generator().manual_seed(17)
        feats, weights, heads = random_instance(gen, num_frames=3, tokens=4, dim=4)
        snapshots = [w.clone() for w in weights]
        for mode in ALL_MODES:
            cross_frame_attend(feats, mode, *weights, heads=heads)
        for w, snap in zip(weights, snapshots):
            assert torch.equal(w, snap)

    def test_shape_errors(self):
        w = torch.eye(4)
        with pytest.raises(ValueError):
            cross_frame_attend(torch.zeros(3, 4), AttentionMode.SELF, w, w, w, w)
        with pytest.raises(ValueError):
            cross_frame_attend(torch.zeros(0, 2, 4), AttentionMode.SELF, w, w, w, w)
        with pytest.raises(ValueError):
            cross_frame_attend(torch.zeros(2, 2, 4), AttentionMode.SELF, torch.eye(3), w, w, w)
        with pytest.raises(ValueError):
            cross_frame_attend(torch.zeros(2, 2, 4), AttentionMode.SELF, w, w, w, w, heads=3)


class TestModePlacement:
    def test_first_of_each_stage_is_st(self):
        ids = ["down.1", "down.2", "mid.0", "up.2", "up.1"]
        modes = default_attention_modes(ids)
        assert modes == {
            "down.1": AttentionMode.ST,
            "down.2": AttentionMode.SC,
            "mid.0": AttentionMode.ST,
            "up.2": AttentionMode.ST,
            "up.1": AttentionMode.SC,
        }

    def test_uniform(self):
        modes = uniform_attention_modes(["a", "b"], AttentionMode.SELF)
        assert set(modes.values()) == {AttentionMode.SELF}


def make_map(gen, f=2, heads=2, n=4, length=3):
    logits = torch.randn(f, heads, n, length, generator=gen)
    return logits.softmax(dim=-1)


class TestRecording:
    def test_store_count_and_rows(self):
        gen = torch.Generator().manual_seed(18)
        ctx = AttentionContext(modes={}, record_maps=True)
        steps, layers = 5, 3
        for t in range(steps):
            ctx.timestep = t
            for layer in range(layers):
                record_cross_attention(ctx, f"layer.{layer}", make_map(gen))
        assert len(ctx.recorded) == steps * layers
        for stored in ctx.recorded.values():
            sums = stored.sum(dim=-1)
            assert (sums - 1).abs().max() <= 1e-5

    def test_duplicate_key_rejected(self):
        gen = torch.Generator().manual_seed(19)
        ctx = AttentionContext(modes={}, record_maps=True, timestep=7)
        record_cross_attention(ctx, "l", make_map(gen))
        with pytest.raises(ValueError, match="duplicate"):
            record_cross_attention(ctx, "l", make_map(gen))

    def test_requires_recording_context(self):
        gen = torch.Generator().manual_seed(20)
        ctx = AttentionContext(modes={}, record_maps=False, timestep=1)
        with pytest.raises(ValueError, match="non-recording"):
            record_cross_attention(ctx, "l", make_map(gen))

    def test_requires_timestep(self):
        gen = torch.Generator().manual_seed(21)
        ctx = AttentionContext(modes={}, record_maps=True)
        with pytest.raises(ValueError, match="timestep"):
            record_cross_attention(ctx, "l", make_map(gen))

    def test_rejects_unnormalized_map(self):
        ctx = AttentionContext(modes={}, record_maps=True, timestep=1)
        with pytest.raises(ValueError, match="sum to 1"):
            record_cross_attention(ctx, "l", torch.full((1, 1, 2, 3), 0.9))

    def test_recorded_map_is_detached_copy(self):
        gen = torch.Generator().manual_seed(22)
        ctx = AttentionContext(modes={}, record_maps=True, timestep=1)
        m = make_map(gen)
        record_cross_attention(ctx, "l", m)
        m.zero_()
        assert ctx.recorded[(1, "l")].sum() > 0


class TestInjection:
    def test_absent_returns_fresh_unchanged(self):
        gen = torch.Generator().manual_seed(23)
        fresh = make_map(gen)
        ctx = AttentionContext(modes={}, timestep=3)
        assert inject_cross_attention(ctx, "l", fresh) is fresh
        ctx = AttentionContext(modes={}, timestep=3, injected_maps={(4, "l"): make_map(gen)})
        assert inject_cross_attention(ctx, "l", fresh) is fresh

    def test_present_returns_injected_and_counts(self):
        gen = torch.Generator().manual_seed(24)
        fresh, stored = make_map(gen), make_map(gen)
        ctx = AttentionContext(modes={}, timestep=3, injected_maps={(3, "l"): stored})
        assert inject_cross_attention(ctx, "l", fresh) is stored
        assert ctx.injections_applied == 1

    def test_disabled_returns_fresh(self):
        gen = torch.Generator().manual_seed(25)
        fresh, stored = make_map(gen), make_map(gen)
        ctx = AttentionContext(
            modes={}, timestep=3, injected_maps={(3, "l"): stored}, inject_enabled=False
        )
        assert inject_cross_attention(ctx, "l", fresh) is fresh
        assert ctx.injections_applied == 0

    def test_wrong_token_count_rejected(self):
        gen = torch.Generator().manual_seed(26)
        fresh = make_map(gen, length=3)
        stored = make_map(gen, length=5)
        ctx = AttentionContext(modes={}, timestep=3, injected_maps={(3, "l"): stored})
        with pytest.raises(ValueError, match="shape"):
            inject_cross_attention(ctx, "l", fresh)

    def test_uncond_view_drops_injection_and_recording(self):
        gen = torch.Generator().manual_seed(27)
        stored = make_map(gen)
        ctx = AttentionContext(
            modes={"a": AttentionMode.ST},
            record_maps=True,
            timestep=3,
            injected_maps={(3, "l"): stored},
        )
        view = ctx.uncond_view()
        assert view.record_maps is False
        assert view.injected_maps is None
        assert view.modes is ctx.modes
        ctx.inject_into_uncond = True
        assert ctx.uncond_view().injected_maps is ctx.injected_maps
