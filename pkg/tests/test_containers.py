import struct

import numpy as np
import pytest

from core.error_handler import EXIT_IO, CalibrationError, DataFormatError, ParameterError
from utils import dataset_io, model_io
from utils.dataset_generator import nearest_class_mean_accuracy, synth_dataset
from utils.dataset_io import BatchPlan, DatasetFile, batch_order, calibration_batches, iterate


class TestDatasetFile:
    def test_file_round_trip_is_byte_stable(self, tiny_dataset, tmp_path):
        path = tmp_path / "calib.evqd"
        dataset_io.save(str(path), tiny_dataset)
        loaded = dataset_io.load(str(path))
        np.testing.assert_array_equal(loaded.samples, tiny_dataset.samples)
        np.testing.assert_array_equal(loaded.labels, tiny_dataset.labels)
        assert dataset_io.to_bytes(loaded) == path.read_bytes()

    def test_unlabeled_dataset(self, rng):
        data = DatasetFile(rng.standard_normal((3, 2, 4)))
        restored = dataset_io.from_bytes(dataset_io.to_bytes(data))
        assert not restored.has_labels
        assert (restored.count, restored.tokens, restored.dim) == (3, 2, 4)

    def test_bad_magic_reports_offset_zero(self, tiny_dataset):
        data = b"XXXX" + dataset_io.to_bytes(tiny_dataset)[4:]
        with pytest.raises(DataFormatError) as info:
            dataset_io.from_bytes(data)
        assert info.value.offset == 0

    @pytest.mark.parametrize("cut", [3, 20, 100])
    def test_truncation_is_detected(self, tiny_dataset, cut):
        data = dataset_io.to_bytes(tiny_dataset)
        with pytest.raises(DataFormatError) as info:
            dataset_io.from_bytes(data[: len(data) - cut] if cut > 50 else data[:cut])
        assert info.value.offset is not None

    def test_trailing_bytes_are_rejected(self, tiny_dataset):
        with pytest.raises(DataFormatError):
            dataset_io.from_bytes(dataset_io.to_bytes(tiny_dataset) + b"\x00")

    def test_subset_and_shape_checks(self, tiny_dataset):
        assert tiny_dataset.subset(10).count == 10
        with pytest.raises(ParameterError):
            tiny_dataset.subset(65)
        with pytest.raises(ParameterError):
            DatasetFile(np.zeros((2, 3)))


class TestBatching:
    def test_ragged_tail(self):
        assert len(batch_order(100, BatchPlan(32))) == 3
        batches = batch_order(100, BatchPlan(32, drop_ragged=False))
        assert len(batches) == 4 and len(batches[-1]) == 4

    def test_shuffle_is_a_pure_function_of_seed(self):
        a = batch_order(50, BatchPlan(10, shuffle_seed=3))
        b = batch_order(50, BatchPlan(10, shuffle_seed=3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert sorted(np.concatenate(a)) == list(range(50))

    def test_batches_carry_labels(self, tiny_dataset):
        batch = next(iterate(tiny_dataset, BatchPlan(8)))
        np.testing.assert_array_equal(batch.labels, tiny_dataset.labels[:8])

    def test_no_full_batch_is_a_calibration_error(self, tiny_dataset):
        with pytest.raises(CalibrationError):
            calibration_batches(tiny_dataset.subset(5), BatchPlan(8))


class TestGenerator:
    def test_same_seed_same_bytes(self):
        a = synth_dataset(32, 4, 8, 4, seed=1)
        b = synth_dataset(32, 4, 8, 4, seed=1)
        c = synth_dataset(32, 4, 8, 4, seed=2)
        assert dataset_io.to_bytes(a) == dataset_io.to_bytes(b)
        assert dataset_io.to_bytes(a) != dataset_io.to_bytes(c)

    def test_labels_are_balanced(self):
        data = synth_dataset(40, 4, 8, 4, seed=0)
        assert np.bincount(data.labels).tolist() == [10, 10, 10, 10]

    def test_classes_are_separable(self):
        data = synth_dataset(512, 16, 32, 10, seed=0)
        assert nearest_class_mean_accuracy(data.samples, data.labels) > 0.9

    def test_splits_share_classes_but_not_samples(self):
        calib = synth_dataset(256, 16, 32, 10, seed=5, split="calib")
        held_out = synth_dataset(256, 16, 32, 10, seed=5, split="eval")
        assert not np.array_equal(calib.samples, held_out.samples)
        x = calib.samples.reshape(calib.count, -1).astype(np.float64)
        means = np.stack([x[calib.labels == c].mean(axis=0) for c in range(10)])
        y = held_out.samples.reshape(held_out.count, -1).astype(np.float64)
        predicted = np.argmin(((y[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
        assert np.mean(predicted == held_out.labels) > 0.9


class TestModelFile:
    def test_round_trip_preserves_every_tensor(self, quant_model, tiny_batches, tmp_path):
        path = tmp_path / "model.evqm"
        digest = model_io.save(str(path), quant_model)
        loaded = model_io.load(str(path))
        assert model_io.model_digest(loaded) == digest == model_io.model_digest(quant_model)
        np.testing.assert_array_equal(loaded.forward(tiny_batches[0]), quant_model.forward(tiny_batches[0]))
        assert loaded.config == quant_model.config

    def test_records_are_canonically_ordered(self, quant_model):
        names = [name for name, _ in model_io.model_records(quant_model)]
        assert names[-2:] == ["head.weight", "head.bias"]
        assert names.index("block.0.scale.attn.w_q.0") < names.index("block.1.attn.b_o")
        assert len(names) == len(set(names))

    def test_bad_magic_and_truncation(self, quant_model):
        data = model_io.to_bytes(quant_model)
        with pytest.raises(DataFormatError) as info:
            model_io.from_bytes(b"EVQD" + data[4:])
        assert info.value.offset == 0
        with pytest.raises(DataFormatError):
            model_io.from_bytes(data[:-8])
        with pytest.raises(DataFormatError):
            model_io.from_bytes(data[:30])
        with pytest.raises(DataFormatError):
            model_io.from_bytes(data + b"\x00\x00\x00\x00")

    @pytest.mark.parametrize("field, value", [("heads", 0), ("weight_bits", 1)])
    def test_invalid_header_configuration_is_a_format_error(self, quant_model, field, value):
        data = bytearray(model_io.to_bytes(quant_model))
        offset = 5 + 4 * model_io.CONFIG_FIELDS.index(field)
        struct.pack_into("<I", data, offset, value)
        with pytest.raises(DataFormatError) as info:
            model_io.from_bytes(bytes(data))
        assert info.value.exit_code == EXIT_IO

    def test_missing_layernorm_record_is_rejected(self, quant_model):
        records = [
            (name, array)
            for name, array in model_io.model_records(quant_model)
            if name != "block.1.ln2.gamma"
        ]
        data = model_io.records_to_bytes(quant_model.config, records)
        with pytest.raises(DataFormatError, match="block.1.ln2.gamma"):
            model_io.from_bytes(data)

    def test_misshaped_bias_record_is_rejected(self, quant_model):
        records = [
            (name, array[:-1] if name == "block.0.attn.b_o" else array)
            for name, array in model_io.model_records(quant_model)
        ]
        data = model_io.records_to_bytes(quant_model.config, records)
        with pytest.raises(DataFormatError, match="block.0.attn.b_o"):
            model_io.from_bytes(data)

    def test_records_beyond_the_configured_blocks_are_rejected(self, quant_model):
        records = model_io.model_records(quant_model)
        records.append(("block.9.ln1.gamma", np.ones(quant_model.config.embed_dim, dtype=np.float32)))
        data = model_io.records_to_bytes(quant_model.config, records)
        with pytest.raises(DataFormatError, match="block.9.ln1.gamma"):
            model_io.from_bytes(data)
