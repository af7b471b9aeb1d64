"""Checkpoint format: bit-exact round trips and distinct failure modes."""

import struct

import numpy as np
import pytest

from formation_lab import nn
from formation_lab.checkpoint import (
    MAGIC, CorruptCheckpointError, ShapeMismatchError, VersionMismatchError,
    load_checkpoint, load_policy_checkpoint, save_checkpoint,
    save_policy_checkpoint,
)
from formation_lab.env import EnvConfig, SwarmEnv
from formation_lab.mappo import Critic
from formation_lab.policy import CommPolicy, PolicyArch


@pytest.fixture
def arrays(rng):
    return {
        "a.w": rng.normal(size=(3, 4)),
        "a.b": rng.normal(size=4),
        "scalarish": rng.normal(size=(1,)),
    }


class TestFormat:
    def test_roundtrip_bit_exact(self, arrays, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, arrays, {"tag": "n5", "seed": 3})
        loaded, meta = load_checkpoint(path)
        assert meta == {"tag": "n5", "seed": 3}
        for name, arr in arrays.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].dtype == np.float64

    def test_save_load_save_identical_bytes(self, arrays, tmp_path):
        p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
        save_checkpoint(p1, arrays, {"tag": "n5"})
        loaded, meta = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_checked(self, arrays, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, arrays, {})
        data = bytearray(path.read_bytes())
        data[:4] = b"ELFF"
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_version_checked(self, arrays, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, arrays, {})
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncation_detected(self, arrays, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, arrays, {})
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_header_garbage_detected(self, tmp_path):
        path = tmp_path / "c.bin"
        blob = b"{not json"
        path.write_bytes(MAGIC + struct.pack("<I", 1) + struct.pack("<I", len(blob)) + blob)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


class TestPolicyCheckpoint:
    def build(self):
        arch = PolicyArch(message_dim=16, hidden_dim=16, heads=2)
        policy = CommPolicy(arch).init_params(np.random.default_rng(0))
        critic = Critic(arch).init_params(np.random.default_rng(1))
        normalizer = nn.ValueNormalizer()
        normalizer.update(np.arange(20.0))
        return arch, policy, critic, normalizer

    def meta(self, arch):
        env = EnvConfig(n_active=5, obs_radius=3.0, message_dim=arch.message_dim)
        import dataclasses
        env_meta = dataclasses.asdict(env)
        env_meta["destination"] = list(env_meta["destination"])
        return {"tag": "n5", "seed": 0, "config_hash": "x", "env": env_meta}

    def test_roundtrip_behavior(self, tmp_path):
        arch, policy, critic, normalizer = self.build()
        path = tmp_path / "p.bin"
        save_policy_checkpoint(path, policy, self.meta(arch), critic, normalizer)
        loaded, critic2, norm2, meta = load_policy_checkpoint(path)
        assert meta["tag"] == "n5"
        for name, arr in policy.theta.params.items():
            np.testing.assert_array_equal(loaded.theta.params[name], arr)
        for name, arr in policy.psi.params.items():
            np.testing.assert_array_equal(loaded.psi.params[name], arr)
        for name, arr in critic.phi.params.items():
            np.testing.assert_array_equal(critic2.phi.params[name], arr)
        assert norm2.std == normalizer.std

        env = SwarmEnv(EnvConfig(n_active=5, obs_radius=3.0,
                                 message_dim=arch.message_dim))
        env.reset(4)
        locals_ = env.local_states()
        np.testing.assert_array_equal(
            policy.act(locals_).mu, loaded.act(locals_).mu
        )

    def test_shape_mismatch_on_load(self, tmp_path):
        arch, policy, critic, normalizer = self.build()
        path = tmp_path / "p.bin"
        save_policy_checkpoint(path, policy, self.meta(arch), critic, normalizer)
        arrays, meta = load_checkpoint(path)
        # rewrite the header to claim widths the arrays do not have
        meta["arch"] = PolicyArch(message_dim=32, hidden_dim=16, heads=2).to_dict()
        save_checkpoint(path, arrays, meta)
        with pytest.raises(ShapeMismatchError):
            load_policy_checkpoint(path)
