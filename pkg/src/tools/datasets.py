from typing import Iterator, Tuple

import numpy as np
import pandas as pd

from src.errors import ManifestError
from src.models.training_models import Batch, Dataset, DatasetSpec
from src.utils import logger


class DatasetLoader:
    """
    Builds fine-tuning data for the search: Gaussian blobs or a CSV file, shuffled once
    with the configured seed and split into disjoint train/validation parts.
    """
    def __init__(self, spec: DatasetSpec):
        self.spec = spec

    def _blobs(self) -> Tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        rng = np.random.default_rng(spec.seed)
        centers = rng.normal(0.0, 3.0, size=(spec.n_classes, spec.n_features))
        labels = np.arange(spec.n_samples) % spec.n_classes
        features = centers[labels] + rng.normal(0.0, spec.cluster_std, size=(spec.n_samples, spec.n_features))
        return features, labels

    def _csv(self) -> Tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        try:
            frame = pd.read_csv(spec.path)
        except (OSError, pd.errors.ParserError) as e:
            logger.error(f"Could not read dataset {spec.path}: {e}")
            raise ManifestError(f"could not read dataset {spec.path}: {e}")
        if spec.label_column not in frame.columns:
            raise ManifestError(f"{spec.path}: label column '{spec.label_column}' not found")
        raw_labels = frame.pop(spec.label_column)
        non_numeric = [c for c in frame.columns if not pd.api.types.is_numeric_dtype(frame[c])]
        if non_numeric:
            raise ManifestError(f"{spec.path}: feature columns must be numeric, got {non_numeric}")
        if pd.api.types.is_integer_dtype(raw_labels) and raw_labels.min() >= 0:
            labels = raw_labels.to_numpy(dtype=np.int64)
        else:
            labels, _ = pd.factorize(raw_labels, sort=True)
        return frame.to_numpy(dtype=np.float64), np.asarray(labels, dtype=np.int64)

    def load(self) -> Dataset:
        spec = self.spec
        features, labels = self._blobs() if spec.source == "synthetic-blobs" else self._csv()
        if spec.input_shape:
            features = features.reshape((features.shape[0],) + tuple(spec.input_shape))

        order = np.random.default_rng(spec.seed).permutation(len(labels))
        features, labels = features[order], labels[order]
        n_val = max(1, int(round(spec.validation_fraction * len(labels))))
        if n_val >= len(labels):
            raise ManifestError(f"dataset of {len(labels)} examples is too small for a train/validation split")

        n_classes = int(labels.max()) + 1 if spec.source == "csv-file" else spec.n_classes
        dataset = Dataset(
            spec=spec,
            train=Batch(inputs=features[n_val:].astype(np.float32), labels=labels[n_val:]),
            validation=Batch(inputs=features[:n_val].astype(np.float32), labels=labels[:n_val]),
            n_classes=n_classes,
        )
        logger.info(
            f"Loaded {spec.source} dataset: {len(dataset.train)} train / {len(dataset.validation)} validation, "
            f"{n_classes} classes"
        )
        return dataset


def load_dataset(spec: DatasetSpec) -> Dataset:
    return DatasetLoader(spec).load()


def iter_batches(split: Batch, batch_size: int, count: int, seed: int) -> Iterator[Batch]:
    """
    Yields `count` batches drawn without replacement from a seeded permutation,
    reshuffling when an epoch runs out. Same seed, same sequence.
    """
    rng = np.random.default_rng(seed)
    n = len(split)
    size = min(batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    for _ in range(count):
        if cursor + size > n:
            order = rng.permutation(n)
            cursor = 0
        picked = order[cursor:cursor + size]
        cursor += size
        yield Batch(inputs=split.inputs[picked], labels=split.labels[picked])


if __name__ == "__main__":
    blobs = load_dataset(DatasetSpec())
    print(f"train={blobs.train.inputs.shape} validation={blobs.validation.inputs.shape}")
