"""Model assembly: flag contracts, gradients routing, checkpoints."""

import numpy as np
import pytest
import torch

from refseg.config import ExperimentConfig
from refseg.data import generate_dataset
from refseg.encoders import EncoderConfig
from refseg.grounding import mask_tokens
from refseg.losses import total_loss
from refseg.model import (
    CHECKPOINT_VERSION,
    ModelConfig,
    RefSegNet,
    batch_grounding_loss,
    collate,
    downsample_mask,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from refseg.seeds import numpy_rng
from refseg.vocab import PAD


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        image_size=64,
        encoder=EncoderConfig(
            image_dims=(8, 8, 16, 16), lang_width=16, heads=2, vocab_size=20
        ),
        cam_scales=(1, 2),
        cam_heads=2,
        predictor_depth=2,
        predictor_heads=2,
        decoder_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def batch():
    ds = generate_dataset(seed=21, count=4)
    return ds, collate(ds)


def masked_for(ds, seed=0, epoch=0, rate=0.15):
    return [
        mask_tokens(s.tokens, rate, numpy_rng(seed, f"mask.e{epoch}.s{s.id}"), s.centroid)
        for s in ds
    ]


class TestForwardShapes:
    def test_default_shapes(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(ModelConfig(), seed=0)
        out = model(images, tokens)
        assert out.mask_logits.shape == (4, 64, 64)
        assert out.decoder_feature.shape == (4, 32, 16, 16)
        assert len(out.stage_pairs) == 4
        assert out.text_final.shape == (4, 12, 64)
        assert out.grounding_logits is None

    def test_eval_mode_repeat_identical(self, batch):
        ds, (images, tokens, _) = batch
        model = RefSegNet(tiny_config(), seed=0).eval()
        a = model(images, tokens)
        b = model(images, tokens)
        assert torch.equal(a.mask_logits, b.mask_logits)
        assert torch.equal(a.decoder_feature, b.decoder_feature)

    def test_masked_forward_requires_grounding(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(grounding_enabled=False), seed=0)
        with pytest.raises(ValueError, match="grounding"):
            model(images, tokens, tokens.clone(), torch.zeros(4, 2), masks)


class TestFlagContracts:
    def test_all_off_equals_baseline_bit_for_bit(self, batch):
        """Same seed, optional parts absent vs present-at-init: identical."""
        ds, (images, tokens, _) = batch
        full = RefSegNet(tiny_config(), seed=9).eval()
        base = RefSegNet(
            tiny_config(cam_enabled=False, grounding_enabled=False, cal_mode="off"),
            seed=9,
        ).eval()
        out_full = full(images, tokens)
        out_base = base(images, tokens)
        # fusion gates are zero-initialized, so the full model at init IS the
        # baseline forward, and shared parameters are themselves identical
        assert torch.equal(out_full.mask_logits, out_base.mask_logits)
        assert torch.equal(out_full.decoder_feature, out_base.decoder_feature)
        for (na, pa), (nb, pb) in zip(
            base.text_encoder.named_parameters(), full.text_encoder.named_parameters()
        ):
            assert na == nb and torch.equal(pa, pb)

    def test_cam_disabled_matches_plain_encoder_forward(self, batch):
        ds, (images, tokens, _) = batch
        model = RefSegNet(tiny_config(cam_enabled=False), seed=4).eval()
        pad = tokens == PAD
        text_plain = model.text_encoder(tokens, pad)
        image_plain = model.image_encoder(images)
        text, image, pairs, _ = model.encode(images, tokens)
        assert torch.equal(text, text_plain)
        assert torch.equal(image, image_plain)

    def test_exactly_one_fusion_call_per_stage(self, batch):
        ds, (images, tokens, _) = batch
        model = RefSegNet(tiny_config(), seed=0)
        calls = {name: 0 for name in model.cam.keys()}

        def spy(name):
            def hook(module, args, output):
                calls[name] += 1

            return hook

        for name, mod in model.cam.items():
            mod.register_forward_hook(spy(name))
        model(images, tokens)
        assert calls == {"stage1": 1, "stage2": 1, "stage3": 1, "stage4": 1}

    def test_cal_projection_only_when_enabled(self):
        assert RefSegNet(tiny_config(cal_mode="off"), seed=0).cal_text_proj is None
        assert RefSegNet(tiny_config(cal_mode="p2p"), seed=0).cal_text_proj is None
        assert RefSegNet(tiny_config(cal_mode="both"), seed=0).cal_text_proj is not None

    def test_grounding_parameters_only_when_enabled(self):
        off = RefSegNet(tiny_config(grounding_enabled=False), seed=0)
        assert off.predictor is None and off.mask_encoder is None
        on = RefSegNet(tiny_config(), seed=0)
        assert on.predictor is not None and on.mask_encoder is not None


class TestTrainStep:
    def test_grounding_only_weights_leave_decoder_head_unmoved(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(loss_weights=(0, 0, 0, 1)), seed=1)
        opt = torch.optim.SGD(model.parameters(), lr=0.0)  # only grads matter
        train_step(model, opt, images, tokens, masks, masked_for(ds), grad_clip=0)
        head_grad = model.decoder.head.weight.grad
        assert head_grad is None or torch.all(head_grad == 0)
        for group, mod in [
            ("image encoder", model.image_encoder),
            ("text encoder", model.text_encoder),
            ("mask encoder", model.mask_encoder),
            ("predictor", model.predictor),
        ]:
            norms = [
                p.grad.norm().item() for p in mod.parameters() if p.grad is not None
            ]
            assert norms and max(norms) > 0, f"no gradient reached the {group}"

    def test_weight_zero_equals_flag_off_bit_for_bit(self, batch):
        """Grounding at weight 0 and grounding disabled produce identical
        parameter trajectories (named rng streams make masking draws free)."""
        ds, (images, tokens, masks) = batch

        def run(cfg, use_masked):
            model = RefSegNet(cfg, seed=3)
            opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
            bundles = []
            for step in range(3):
                masked = masked_for(ds, epoch=step) if use_masked else None
                bundles.append(
                    train_step(model, opt, images, tokens, masks, masked, grad_clip=0)
                )
            return model, bundles

        m_zero, b_zero = run(tiny_config(loss_weights=(2, 2, 0.5, 0)), True)
        m_off, b_off = run(
            tiny_config(grounding_enabled=False, loss_weights=(2, 2, 0.5, 0)), False
        )
        for a, b in zip(b_zero, b_off):
            assert a.bce == b.bce and a.dice == b.dice and a.cal == b.cal
            assert a.total == b.total
        shared = dict(m_off.named_parameters())
        for name, p in m_zero.named_parameters():
            if name in shared:
                assert torch.equal(p, shared[name]), name

    def test_identical_runs_identical_bundle_streams(self, batch):
        ds, (images, tokens, masks) = batch

        def run():
            model = RefSegNet(tiny_config(), seed=5)
            opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
            return [
                train_step(model, opt, images, tokens, masks, masked_for(ds, epoch=e))
                for e in range(3)
            ]

        for a, b in zip(run(), run()):
            assert a.to_dict() == b.to_dict()

    @pytest.mark.parametrize(
        "flags",
        [
            dict(cam_enabled=False, grounding_enabled=False, cal_mode="off"),
            dict(cam_enabled=False, grounding_enabled=True, cal_mode="off"),
            dict(cam_enabled=True, grounding_enabled=False, cal_mode="off"),
            dict(cam_enabled=False, grounding_enabled=False, cal_mode="both"),
            dict(cam_enabled=True, grounding_enabled=True, cal_mode="both"),
        ],
    )
    def test_loss_decreases_on_repeated_batch(self, batch, flags):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(**flags), seed=2)
        opt = torch.optim.AdamW(model.parameters(), lr=2e-3)
        totals = []
        for step in range(50):
            masked = masked_for(ds, epoch=step) if flags["grounding_enabled"] else None
            totals.append(
                train_step(model, opt, images, tokens, masks, masked).total
            )
        assert np.mean(totals[-5:]) < np.mean(totals[:5]) * 0.8

    def test_nan_loss_aborts_with_component_name(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(), seed=0)
        with torch.no_grad():
            model.decoder.head.weight[0, 0, 0, 0] = float("nan")
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        with pytest.raises(FloatingPointError, match="bce"):
            train_step(model, opt, images, tokens, masks, masked_for(ds))


class TestMaskInputVariants:
    @pytest.mark.parametrize("variant", ["center", "average", "none"])
    def test_variants_run_and_learn_signal_path(self, batch, variant):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(mask_input=variant), seed=6)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        bundle = train_step(model, opt, images, tokens, masks, masked_for(ds))
        assert np.isfinite(bundle.grounding) and bundle.grounding > 0

    def test_average_variant_uses_region_features(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(mask_input="average"), seed=6).eval()
        out_a = model(
            images, tokens, torch.stack([torch.as_tensor(m.tokens) for m in masked_for(ds)]),
            None, masks,
        )
        flipped = 1 - masks  # different region, different mask embedding
        out_b = model(
            images, tokens, torch.stack([torch.as_tensor(m.tokens) for m in masked_for(ds)]),
            None, flipped,
        )
        assert not torch.allclose(out_a.grounding_logits, out_b.grounding_logits)


class TestBatchHelpers:
    def test_collate_shapes_and_types(self, batch):
        ds, (images, tokens, masks) = batch
        assert images.shape == (4, 3, 64, 64) and images.dtype == torch.float32
        assert tokens.shape == (4, 12) and tokens.dtype == torch.int64
        assert masks.shape == (4, 64, 64)

    def test_downsample_mask_nearest(self):
        m = torch.zeros(1, 8, 8, dtype=torch.long)
        m[0, :4, :4] = 1
        small = downsample_mask(m, (4, 4))
        assert small.shape == (1, 4, 4)
        assert small.sum() == 4  # top-left quadrant only
        with pytest.raises(ValueError, match="multiple"):
            downsample_mask(m, (3, 3))

    def test_batch_grounding_loss_pools_positions(self, batch):
        ds, (images, tokens, masks) = batch
        model = RefSegNet(tiny_config(), seed=0).eval()
        masked = masked_for(ds)
        out = model(
            images, tokens,
            torch.stack([torch.as_tensor(m.tokens) for m in masked]),
            torch.tensor([m.centroid for m in masked], dtype=torch.float32),
            masks,
        )
        loss = batch_grounding_loss(out.grounding_logits, masked)
        assert float(loss) > 0


class TestCheckpoint:
    def test_round_trip_identical_outputs(self, tmp_path, batch):
        ds, (images, tokens, _) = batch
        model = RefSegNet(tiny_config(), seed=8).eval()
        save_checkpoint(model, tmp_path / "ck.npz", seed=8)
        loaded, meta = load_checkpoint(tmp_path / "ck.npz")
        loaded.eval()
        assert meta["version"] == CHECKPOINT_VERSION
        a = model(images, tokens)
        b = loaded(images, tokens)
        assert torch.equal(a.mask_logits, b.mask_logits)

    def test_unknown_version_rejected(self, tmp_path, batch):
        model = RefSegNet(tiny_config(), seed=0)
        save_checkpoint(model, tmp_path / "ck.npz", seed=0)
        data = dict(np.load(tmp_path / "ck.npz"))
        import json

        meta = json.loads(bytes(data["__meta__"]).decode())
        meta["version"] = 99
        data["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(tmp_path / "bad.npz", **data)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "bad.npz")

    def test_fusion_parameters_live_under_cam_stage_names(self):
        model = RefSegNet(tiny_config(), seed=0)
        names = [n for n, _ in model.named_parameters()]
        for i in (1, 2, 3, 4):
            assert any(n.startswith(f"cam.stage{i}.") for n in names)


class TestModelConfig:
    def test_round_trip(self):
        cfg = tiny_config()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ValueError, match="image_size"):
            ModelConfig(image_size=48)
        with pytest.raises(ValueError, match="mask_input"):
            ModelConfig(mask_input="bbox")
        with pytest.raises(ValueError, match="cal_mode"):
            ModelConfig(cal_mode="everything")

    def test_stage_sizes(self):
        assert ModelConfig().stage_sizes() == [16, 8, 4, 2]
