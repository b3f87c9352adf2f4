import hashlib
import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_meta, tiny_backbone
from stssl.dataset import GeoTemporal
from stssl.model import (CONTAINER_MAGIC, BackboneConfig, CheckpointError, build_model, encode_metadata,
                         init_params, load_snapshot, normalize_metadata, parameter_count, read_container,
                         write_container)


def _images(n, cfg, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, cfg.image_size, cfg.image_size, generator=g, dtype=dtype)


def _randomise(model, seed=0, scale=0.3):
    """Move away from the init so every parameter (biases, norms, tokens) matters."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


class TestBackboneConfig:
    @pytest.mark.parametrize("kw", [
        dict(image_size=10, patch_size=4),
        dict(embed_dim=15, num_heads=2),
        dict(variant="teacher", fusion="none"),
        dict(variant="student", fusion="early-metatoken"),
        dict(variant="plain", fusion="late-fusion"),
        dict(variant="mentor"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)

    def test_defaults_are_desk_scale(self):
        cfg = BackboneConfig()
        assert (cfg.embed_dim, cfg.depth, cfg.num_heads, cfg.patch_size, cfg.image_size) == (192, 6, 3, 4, 32)

    def test_dict_round_trip_rejects_unknown(self):
        cfg = tiny_backbone("teacher")
        assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            BackboneConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


class TestNormalizeMetadata:
    def test_zero(self):
        np.testing.assert_array_equal(normalize_metadata(GeoTemporal(0, 0, 0)), [0, 0, 0])

    def test_hand_computed(self):
        np.testing.assert_allclose(normalize_metadata(GeoTemporal(48.1, 11.6, 172)),
                                   [0.5344444444, 0.0644444444, 0.4709103354], atol=1e-9)

    def test_absent_time_uses_fill(self):
        np.testing.assert_allclose(normalize_metadata(GeoTemporal(45, -90)), [0.5, -0.5, 0.5])
        np.testing.assert_allclose(normalize_metadata(GeoTemporal(45, -90), fill=0.0), [0.5, -0.5, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(lat=st.floats(-90, 90), lon=st.floats(-180, 180), day=st.floats(0, 365.9))
    def test_ranges(self, lat, lon, day):
        v = normalize_metadata(GeoTemporal(lat, lon, day))
        assert -1 <= v[0] <= 1 and -1 <= v[1] <= 1 and 0 <= v[2] < 1.0025

    def test_batch_features_match_scalar_version(self, teacher_cfg):
        model = build_model(teacher_cfg)
        from stssl.model import metadata_features
        meta = torch.tensor([[48.1, 11.6, 172.0], [-10.0, 100.0, float("nan")]], dtype=torch.float64)
        feats = metadata_features(meta, teacher_cfg)
        np.testing.assert_allclose(feats[0].numpy(), normalize_metadata(GeoTemporal(48.1, 11.6, 172.0)))
        np.testing.assert_allclose(feats[1].numpy(), normalize_metadata(GeoTemporal(-10.0, 100.0)))
        assert model.meta_encoder.fc1.in_features == 3


class TestEncodeMetadata:
    def _params(self, d=16, seed=0, dtype=torch.float64):
        g = torch.Generator().manual_seed(seed)
        return {"fc1.weight": torch.randn(d, 3, generator=g, dtype=dtype),
                "fc1.bias": torch.randn(d, generator=g, dtype=dtype),
                "fc2.weight": torch.randn(d, d, generator=g, dtype=dtype),
                "fc2.bias": torch.randn(d, generator=g, dtype=dtype)}

    def test_zero_params(self):
        params = {k: torch.zeros_like(v) for k, v in self._params().items()}
        out = encode_metadata(torch.tensor([[0.3, -0.2, 0.7]], dtype=torch.float64), params)
        assert torch.equal(out, torch.zeros(1, 16, dtype=torch.float64))

    def test_matches_matrix_oracle(self):
        p = {k: v.float() for k, v in self._params().items()}
        x = np.array([[0.5344, 0.0644, 0.4709], [-0.2, 0.9, 0.5]], dtype=np.float64)
        w1, b1, w2, b2 = (p[k].double().numpy() for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"))
        h = np.empty((2, 16))
        for i in range(2):
            for j in range(16):
                h[i, j] = sum(x[i, c] * w1[j, c] for c in range(3)) + b1[j]
        from math import erf, sqrt
        h = h * 0.5 * (1 + np.vectorize(erf)(h / sqrt(2)))
        ref = h @ w2.T + b2
        out = encode_metadata(torch.from_numpy(x).float(), p)
        np.testing.assert_allclose(out.numpy(), ref, atol=1e-5, rtol=1e-6)

    def test_input_gradient_matches_finite_differences(self):
        p = self._params()
        x = torch.tensor([[0.3, -0.4, 0.6]], dtype=torch.float64, requires_grad=True)
        w = torch.randn(16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        (encode_metadata(x, p) @ w).sum().backward()
        eps = 1e-6
        fd = torch.zeros(3, dtype=torch.float64)
        for c in range(3):
            e = torch.zeros_like(x)
            e[0, c] = eps
            fd[c] = ((encode_metadata(x + e, p) @ w).sum() - (encode_metadata(x - e, p) @ w).sum()) / (2 * eps)
        rel = (x.grad[0] - fd).norm() / fd.norm()
        assert rel < 1e-4

    def test_module_uses_same_function(self, teacher_cfg):
        model = _randomise(build_model(teacher_cfg))
        vec = torch.rand(4, 3)
        params = {k: v for k, v in model.meta_encoder.named_parameters()}
        assert torch.equal(model.meta_encoder(vec), encode_metadata(vec, params))
        assert model.meta_encoder.fc2.out_features == teacher_cfg.embed_dim


class TestForward:
    def test_token_counts(self):
        assert tiny_backbone("teacher").seq_len == 4 + 2
        assert tiny_backbone("student").seq_len == 4 + 2
        assert tiny_backbone("plain").seq_len == 4 + 1
        assert tiny_backbone("teacher", fusion="late-fusion").seq_len == 4 + 1
        cfg = BackboneConfig(image_size=32, patch_size=4, variant="teacher", fusion="early-metatoken")
        assert build_model(cfg).pos_embed.shape[1] == 64 + 2

    def test_output_shapes(self, teacher_cfg, student_cfg):
        rng = np.random.default_rng(0)
        t = build_model(teacher_cfg)(_images(3, teacher_cfg), random_meta(3, rng))
        s = build_model(student_cfg)(_images(3, student_cfg))
        for out in (t, s):
            assert out.logits.shape == (3, 4)
            assert out.cls_embedding.shape == out.special_embedding.shape == (3, 16)
        assert build_model(tiny_backbone("plain"))(_images(3, student_cfg)).special_embedding is None

    def test_student_ignores_metadata_bitwise(self, student_cfg):
        model = _randomise(build_model(student_cfg, seed=1))
        rng = np.random.default_rng(0)
        x = _images(6, student_cfg)
        a = model(x, random_meta(6, rng))
        b = model(x, random_meta(6, rng, with_time=False))
        c = model(x)
        for other in (b, c):
            assert torch.equal(a.logits, other.logits)
            assert torch.equal(a.special_embedding, other.special_embedding)
            assert torch.equal(a.cls_embedding, other.cls_embedding)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_student_invariance_property(self, seed):
        cfg = tiny_backbone("student")
        model = _randomise(build_model(cfg, seed=seed % 7), seed=seed)
        rng = np.random.default_rng(seed)
        x = _images(2, cfg, seed)
        assert torch.equal(model(x, random_meta(2, rng)).logits, model(x, random_meta(2, rng)).logits)

    def test_teacher_requires_metadata(self, teacher_cfg):
        model = build_model(teacher_cfg)
        with pytest.raises(ValueError, match="metadata"):
            model(_images(2, teacher_cfg))
        with pytest.raises(ValueError, match="shape"):
            model(_images(2, teacher_cfg), torch.zeros(3, 3))

    def test_image_shape_mismatch(self, student_cfg):
        with pytest.raises(ValueError, match="shape"):
            build_model(student_cfg)(torch.zeros(2, 3, 16, 16))

    def test_teacher_depends_on_metadata(self, teacher_cfg):
        model = _randomise(build_model(teacher_cfg))
        x = _images(4, teacher_cfg)
        rng = np.random.default_rng(0)
        assert not torch.equal(model(x, random_meta(4, rng)).logits, model(x, random_meta(4, rng)).logits)

    @pytest.mark.parametrize("variant", ["teacher", "student", "plain"])
    def test_batch_independence(self, variant):
        cfg = tiny_backbone(variant)
        model = _randomise(build_model(cfg))
        x = _images(4, cfg)
        meta = random_meta(4, np.random.default_rng(0))
        full = model(x, meta).logits
        single = model(x[2:3], meta[2:3]).logits
        torch.testing.assert_close(single[0], full[2], atol=1e-5, rtol=0)

    def test_finite_outputs_for_random_inputs(self, teacher_cfg, student_cfg):
        rng = np.random.default_rng(0)
        teacher, student = build_model(teacher_cfg), build_model(student_cfg)
        for start in range(0, 1000, 250):
            x = _images(250, teacher_cfg, seed=start)
            meta = random_meta(250, rng, with_time=start % 500 == 0)
            for out in (teacher(x, meta), student(x)):
                assert torch.isfinite(out.logits).all()
                assert torch.isfinite(out.special_embedding).all()

    def test_missing_time_fill_and_learned(self):
        cfg = tiny_backbone("teacher")
        model = _randomise(build_model(cfg))
        x = _images(1, cfg)
        nan_meta = torch.tensor([[10.0, 20.0, float("nan")]])
        mid = torch.tensor([[10.0, 20.0, 0.5 * 365.25]])
        torch.testing.assert_close(model(x, nan_meta).logits, model(x, mid).logits)
        learned = build_model(cfg.replace(missing_time="learned"))
        assert learned.missing_time.requires_grad


class TestLateFusion:
    def _pair(self):
        late_cfg = tiny_backbone("teacher", fusion="late-fusion")
        late = _randomise(build_model(late_cfg, seed=2), seed=2)
        plain = build_model(tiny_backbone("plain"))
        own = dict(late.named_parameters())
        load_snapshot(plain, {n: own[n].detach() for n, _ in plain.named_parameters()})
        return late, plain, late_cfg

    def test_zero_encoder_equals_plain_forward(self):
        late, plain, cfg = self._pair()
        with torch.no_grad():
            for p in late.meta_encoder.parameters():
                p.zero_()
        x = _images(5, cfg)
        meta = random_meta(5, np.random.default_rng(1))
        assert torch.equal(late(x, meta).logits, plain(x).logits)

    def test_attention_ignores_metadata(self):
        late, _, cfg = self._pair()
        x = _images(3, cfg)
        rng = np.random.default_rng(0)
        a = late(x, random_meta(3, rng), return_attention=True)
        b = late(x, random_meta(3, rng), return_attention=True)
        assert len(a.attention) == cfg.depth
        for pa, pb in zip(a.attention, b.attention):
            assert torch.equal(pa, pb)
        assert not torch.equal(a.logits, b.logits)

    def test_metadata_added_to_cls_embedding(self):
        late, _, cfg = self._pair()
        x = _images(2, cfg)
        meta = random_meta(2, np.random.default_rng(3))
        out = late(x, meta)
        torch.testing.assert_close(out.special_embedding, out.cls_embedding + late.encode_meta(meta))

    def test_early_fusion_attention_depends_on_metadata(self, teacher_cfg):
        model = _randomise(build_model(teacher_cfg))
        x = _images(2, teacher_cfg)
        rng = np.random.default_rng(0)
        a = model(x, random_meta(2, rng), return_attention=True).attention[0]
        b = model(x, random_meta(2, rng), return_attention=True).attention[0]
        assert not torch.equal(a, b)


class TestParams:
    def test_same_seed_same_snapshot(self, teacher_cfg):
        a, b = init_params(teacher_cfg, 3), init_params(teacher_cfg, 3)
        assert list(a) == list(b)
        assert all(torch.equal(a[k], b[k]) for k in a)
        c = init_params(teacher_cfg, 4)
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_special_tokens_share_init_scheme(self, student_cfg):
        model = build_model(student_cfg, seed=0)
        for t in (model.cls_token, model.dist_token):
            assert t.abs().max() <= 0.04 and t.std() > 0

    def test_teacher_and_student_are_disjoint(self, teacher_cfg, student_cfg):
        teacher, student = build_model(teacher_cfg, 1), build_model(student_cfg, 2)
        t_ptrs = {p.data_ptr() for p in teacher.parameters()}
        assert t_ptrs.isdisjoint(p.data_ptr() for p in student.parameters())
        t_names, s_names = set(init_params(teacher_cfg)), set(init_params(student_cfg))
        assert "dist_token" in s_names - t_names
        assert any(n.startswith("meta_encoder.") for n in t_names - s_names)

    def test_parameter_count_toy_config(self):
        # embed 16, depth 2, mlp hidden 32, 8px images / patch 4 (4 patches), 4 classes
        patch = 16 * 3 * 4 * 4 + 16
        block = 2 * (2 * 16) + (16 * 48 + 48) + (16 * 16 + 16) + (16 * 32 + 32) + (32 * 16 + 16)
        tail = 2 * 16 + 16 * 4 + 4
        meta = (3 * 16 + 16) + (16 * 16 + 16)
        teacher = patch + 16 + 6 * 16 + 2 * block + tail + meta
        student = patch + 16 + 16 + 6 * 16 + 2 * block + tail
        plain = patch + 16 + 5 * 16 + 2 * block + tail
        assert teacher == 5780
        for variant, expected in (("teacher", teacher), ("student", student), ("plain", plain)):
            cfg = tiny_backbone(variant)
            assert parameter_count(cfg) == expected
            assert sum(p.numel() for p in build_model(cfg).parameters()) == expected

    def test_load_snapshot_rejects_foreign_names(self, teacher_cfg, student_cfg):
        with pytest.raises(ValueError, match="names differ"):
            load_snapshot(build_model(student_cfg), init_params(teacher_cfg))


class TestGradients:
    @pytest.mark.parametrize("variant", ["teacher", "student"])
    def test_finite_difference_every_parameter_group(self, variant):
        cfg = tiny_backbone(variant)
        model = _randomise(build_model(cfg, seed=0), seed=1).double()
        x = _images(2, cfg, dtype=torch.float64)
        meta = random_meta(2, np.random.default_rng(0)).double()

        def f():
            return model(x, meta).logits.sum()

        model.zero_grad()
        f().backward()
        rng = torch.Generator().manual_seed(0)
        eps = 1e-6
        for name, p in model.named_parameters():
            # directional derivative along a random direction, plus a few single coordinates
            directions = [torch.randn(p.shape, generator=rng, dtype=p.dtype)]
            for idx in torch.randint(0, p.numel(), (3,), generator=rng):
                e = torch.zeros(p.numel(), dtype=p.dtype)
                e[idx] = 1.0
                directions.append(e.view(p.shape))
            for v in directions:
                with torch.no_grad():
                    p.add_(eps * v)
                    up = f().item()
                    p.sub_(2 * eps * v)
                    down = f().item()
                    p.add_(eps * v)
                fd = (up - down) / (2 * eps)
                an = float((p.grad * v).sum())
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-8, (name, fd, an)


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path, teacher_cfg):
        params = init_params(teacher_cfg, 0)
        tensors = {**params, "step": torch.tensor([7]), "flag": torch.tensor([True, False])}
        write_container(tmp_path / "c.ckpt", tensors, {"config": teacher_cfg.to_dict(), "step": 7})
        back, meta = read_container(tmp_path / "c.ckpt")
        assert list(back) == list(tensors)
        assert all(torch.equal(back[k], tensors[k]) and back[k].dtype == tensors[k].dtype for k in tensors)
        assert BackboneConfig.from_dict(meta["config"]) == teacher_cfg and meta["step"] == 7

    def test_deterministic_bytes(self, tmp_path, student_cfg):
        params = init_params(student_cfg, 0)
        a = write_container(tmp_path / "a.ckpt", params, {"x": 1}).read_bytes()
        b = write_container(tmp_path / "b.ckpt", params, {"x": 1}).read_bytes()
        assert a == b

    def test_corruption_detected(self, tmp_path, student_cfg):
        path = write_container(tmp_path / "c.ckpt", init_params(student_cfg), {})
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            read_container(path)

    def test_not_a_container(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError):
            read_container(tmp_path / "x.ckpt")
        with pytest.raises(FileNotFoundError):
            read_container(tmp_path / "missing.ckpt")

    def test_version_mismatch(self, tmp_path, student_cfg):
        path = write_container(tmp_path / "c.ckpt", init_params(student_cfg), {})
        body = bytearray(path.read_bytes()[:-32])
        struct.pack_into("<I", body, len(CONTAINER_MAGIC), 99)
        path.write_bytes(bytes(body) + hashlib.sha256(body).digest())
        with pytest.raises(CheckpointError, match="version"):
            read_container(path)

    def test_independent_reader(self, tmp_path, teacher_cfg):
        """The documented layout can be parsed with struct/json/numpy alone."""
        params = init_params(teacher_cfg, 5)
        data = write_container(tmp_path / "c.ckpt", params, {"k": "v"}).read_bytes()
        assert data[:8] == b"STSSLCKP"
        assert hashlib.sha256(data[:-32]).digest() == data[-32:]
        version, hlen = struct.unpack("<IQ", data[8:20])
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
        blob = data[20 + hlen:-32]
        assert version == 1 and header["meta"] == {"k": "v"}
        for entry in header["tensors"]:
            raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            np.testing.assert_array_equal(arr, params[entry["name"]].numpy())

