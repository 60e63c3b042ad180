import os
import sys

import json
import numpy as np
import pandas as pd
import struct
import tempfile
import unittest

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../RAttentionDesk"))
)
from attention import AttnConfig
from model import *
from recall_task import RecallTask, TaskMode
from training import TrainConfig
from save_load import *


def small_model(dtype=np.float32, seed: int = 0) -> Model:
    cfg = ModelConfig(
        vocab_size=24,
        d_model=16,
        n_layers=2,
        ffn_dim=20,
        attn=AttnConfig(d_model=16, n_heads=2, n_kv_heads=1, head_dim=8, window=4, chunk_size=2),
        local_global_period=2,
    )
    return Model(cfg, seed=seed, dtype=dtype)


class TestCheckpoint(unittest.TestCase):
    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.filename = os.path.join(self.directory.name, "nested", "model.rattn")

    def tearDown(self) -> None:
        self.directory.cleanup()

    def test_round_trip(self):
        model = small_model(seed=4)
        CheckpointLoader(self.filename, model, step=12).save()
        loader = CheckpointLoader(self.filename)
        loader.load()
        self.assertEqual(loader.step, 12, "Step is restored.")
        self.assertEqual(loader.model.seed, 4, "Seed is restored.")
        self.assertEqual(loader.model.cfg, model.cfg, "Config is restored.")
        original = model.state_dict()
        for name, array in loader.model.state_dict().items():
            np.testing.assert_array_equal(array, original[name], f"'{name}' is restored exactly.")
        tokens = np.arange(10).reshape(1, 10) % 24
        np.testing.assert_array_equal(
            model_forward(tokens, loader.model).data, model_forward(tokens, model).data, "Same logits."
        )

    def test_float64_stored_as_float32(self):
        model = small_model(np.float64)
        CheckpointLoader(self.filename, model).save()
        loader = CheckpointLoader(self.filename)
        loader.load()
        self.assertEqual(loader.model.dtype, np.float32, "Checkpoints hold float32.")
        np.testing.assert_array_equal(
            loader.model.lm_head.data, model.lm_head.data.astype(np.float32), "Values are rounded to float32."
        )

    def test_layout(self):
        model = small_model()
        CheckpointLoader(self.filename, model).save()
        with open(self.filename, "rb") as file:
            blob = file.read()
        magic, version, header_length = struct.unpack_from("<8sII", blob)
        self.assertEqual((magic, version), (b"RATTNCKP", 1), "Magic number and version.")
        self.assertEqual(len(blob), 16 + header_length + 4 * model.num_parameters(), "float32 payload.")

    def corrupt(self, transform) -> None:
        CheckpointLoader(self.filename, small_model()).save()
        with open(self.filename, "rb") as file:
            blob = file.read()
        with open(self.filename, "wb") as file:
            file.write(transform(blob))
        with self.assertRaises(CheckpointFormatError):
            CheckpointLoader(self.filename).load()

    def test_bad_magic(self):
        self.corrupt(lambda blob: b"NOTACKPT" + blob[8:])

    def test_bad_version(self):
        self.corrupt(lambda blob: blob[:8] + struct.pack("<I", 7) + blob[12:])

    def test_truncated(self):
        self.corrupt(lambda blob: blob[:-4])
        self.corrupt(lambda blob: blob[:10])

    def test_corrupt_header(self):
        def transform(blob: bytes) -> bytes:
            _, _, header_length = struct.unpack_from("<8sII", blob)
            return blob[:16] + b"{" * header_length + blob[16 + header_length :]

        self.corrupt(transform)

    def test_unbuildable_header(self):
        def transform(blob: bytes) -> bytes:
            _, version, header_length = struct.unpack_from("<8sII", blob)
            header = json.loads(blob[16 : 16 + header_length].decode("utf-8"))
            header["seed"] = -1
            text = json.dumps(header).encode("utf-8")
            return struct.pack("<8sII", b"RATTNCKP", version, len(text)) + text + blob[16 + header_length :]

        self.corrupt(transform)

    def test_not_loaded(self):
        with self.assertRaises(Loader.NotYetLoadedError):
            CheckpointLoader(self.filename).model
        with self.assertRaises(Loader.NoFilenameProvidedError):
            CheckpointLoader(None, small_model()).save()


class TestConfigLoader(unittest.TestCase):
    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.filename = os.path.join(self.directory.name, "run.ini")

    def tearDown(self) -> None:
        self.directory.cleanup()

    def write(self, text: str) -> ConfigLoader:
        with open(self.filename, "w") as file:
            file.write(text)
        loader = ConfigLoader(self.filename)
        loader.load()
        return loader

    def test_build(self):
        loader = self.write("[train]\nsteps = 20\nlr = 0.01  # faster\n\n[task]\nmode = beyond_receptive_field\n")
        cfg = loader.build("train", TrainConfig)
        self.assertEqual((cfg.steps, cfg.lr, cfg.batch_size), (20, 0.01, 16), "File values over defaults.")
        self.assertEqual(loader.build("train", TrainConfig, steps=5).steps, 5, "Flags over file values.")
        task = loader.build("task", RecallTask)
        self.assertEqual(task.mode, TaskMode.BEYOND_RECEPTIVE_FIELD, "Enum values parse.")
        self.assertEqual(loader.build("hardware", TrainConfig), TrainConfig(), "Missing sections give defaults.")

    def test_bool(self):
        loader = self.write("[attention]\nuse_rope = no\nchunkwise = True\n")
        cfg = loader.build("attention", AttnConfig)
        self.assertFalse(cfg.use_rope, "'no' is false.")
        self.assertTrue(cfg.chunkwise, "'True' is true.")

    def test_errors(self):
        loader = self.write("[train]\nstepz = 20\n")
        with self.assertRaises(ConfigError):
            loader.build("train", TrainConfig)
        loader = self.write("[train]\nsteps = many\n")
        with self.assertRaises(ConfigError):
            loader.build("train", TrainConfig)
        loader = self.write("[train]\nlr = -1\n")
        with self.assertRaises(ConfigError):
            loader.build("train", TrainConfig)
        loader = self.write("[attention]\nuse_rope = maybe\n")
        with self.assertRaises(ConfigError):
            loader.build("attention", AttnConfig)
        loader = self.write("[trian]\nsteps = 20\n")
        with self.assertRaises(ConfigError):
            loader.check_sections({"train": TrainConfig})
        with self.assertRaises(ConfigError):
            self.write("steps = 20\n")

    def test_save(self):
        ConfigLoader(self.filename, {"task": RecallTask(mode=TaskMode.BEYOND_RECEPTIVE_FIELD).to_dict()}).save()
        loader = ConfigLoader(self.filename)
        loader.load()
        self.assertEqual(
            loader.build("task", RecallTask), RecallTask(mode=TaskMode.BEYOND_RECEPTIVE_FIELD), "Saved configs load back."
        )
        with self.assertRaises(Loader.NotYetLoadedError):
            ConfigLoader(self.filename).sections


class TestTableLoader(unittest.TestCase):
    def test_csv_and_json(self):
        table = pd.DataFrame({"step": [0, 10], "loss": [3.4, 1.2], "accuracy": [0.0, 0.5]})
        with tempfile.TemporaryDirectory() as directory:
            for name in ("metrics.csv", "metrics.json"):
                filename = os.path.join(directory, name)
                TableLoader(filename, table, {"profile": "h100-bf16"}).save()
                loader = TableLoader(filename)
                loader.load()
                pd.testing.assert_frame_equal(loader.table, table, check_dtype=False, obj=name)
            self.assertEqual(loader.metadata, {"profile": "h100-bf16"}, "JSON keeps metadata.")


if __name__ == "__main__":
    unittest.main()
