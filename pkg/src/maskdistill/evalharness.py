"""Representation-quality measurement: frozen-feature export, linear probe,
and cosine kNN classification."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from maskdistill import dataio, model
from maskdistill.errors import DatasetError, ParameterError
from maskdistill.trainer import TrainState, load_checkpoint


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    num_train: int
    num_test: int
    protocol: str

    def summary(self) -> str:
        return (f"{self.protocol}: accuracy={self.accuracy:.4f} "
                f"(train={self.num_train}, test={self.num_test})")


@dataclass
class FeatureTable:
    ids: list[str]
    labels: list[Optional[int]]
    features: np.ndarray  # n x C

    def labeled(self) -> "FeatureTable":
        keep = [i for i, l in enumerate(self.labels) if l is not None]
        return FeatureTable(ids=[self.ids[i] for i in keep],
                            labels=[self.labels[i] for i in keep],
                            features=self.features[keep])


def extract_features(state: TrainState, manifest: dataio.DatasetManifest,
                     batch_size: int = 64) -> FeatureTable:
    """GAP of the student's final feature map per image, in manifest order."""
    net = state.model
    net.eval()
    cfg = state.cfg
    ids, labels, chunks = [], [], []
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            records = [dataio.load_record(manifest, i, cfg.image_size)
                       for i in range(start, min(start + batch_size, len(manifest)))]
            batch = np.stack([r.pixels for r in records]).astype(np.float32)
            x = torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()
            fmap = net.student_backbone(x)
            pooled = fmap.mean(dim=(2, 3))
            chunks.append(pooled.numpy())
            ids.extend(r.id for r in records)
            labels.extend(r.label for r in records)
    return FeatureTable(ids=ids, labels=labels, features=np.concatenate(chunks))


def extract_features_from_checkpoint(ckpt_path: str | os.PathLike,
                                     manifest: dataio.DatasetManifest,
                                     force: bool = False) -> FeatureTable:
    state = load_checkpoint(ckpt_path, force=force)
    return extract_features(state, manifest)


def write_feature_csv(table: FeatureTable, path: str | os.PathLike) -> None:
    width = table.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"f{i + 1}" for i in range(width)])
        for rec_id, label, row in zip(table.ids, table.labels, table.features):
            writer.writerow([rec_id, "" if label is None else label]
                            + [f"{v:.8g}" for v in row])


def read_feature_csv(path: str | os.PathLike) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise DatasetError(f"{path}: expected 'id,label,f1,...' header")
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]) if row[1] != "" else None)
            rows.append([float(v) for v in row[2:]])
    return FeatureTable(ids=ids, labels=labels, features=np.asarray(rows))


def _probe_result(pred: np.ndarray, truth: np.ndarray, num_train: int,
                  protocol: str) -> ProbeResult:
    per_class = {}
    for cls in np.unique(truth):
        sel = truth == cls
        per_class[int(cls)] = float((pred[sel] == cls).mean())
    return ProbeResult(accuracy=float((pred == truth).mean()),
                       per_class=per_class, num_train=num_train,
                       num_test=len(truth), protocol=protocol)


def linear_probe(features_train: FeatureTable, features_test: FeatureTable,
                 epochs: int = 200, lr: float = 0.05,
                 seed: int = 0) -> ProbeResult:
    """Multinomial logistic regression on frozen features."""
    train = features_train.labeled()
    test = features_test.labeled()
    y_train = np.asarray(train.labels)
    y_test = np.asarray(test.labels)
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ParameterError("linear probe needs at least 2 training classes")
    missing = set(np.unique(y_test)) - set(classes)
    if missing:
        warnings.warn(f"test classes absent from train split: {sorted(missing)}; "
                      "those samples count as errors", stacklevel=2)

    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0) + 1e-8
    x_train = torch.from_numpy(((train.features - mean) / std).astype(np.float32))
    x_test = torch.from_numpy(((test.features - mean) / std).astype(np.float32))

    class_index = {c: i for i, c in enumerate(classes)}
    t_train = torch.tensor([class_index[c] for c in y_train])

    torch.manual_seed(seed)
    clf = torch.nn.Linear(x_train.shape[1], len(classes))
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(clf(x_train), t_train)
        loss.backward()
        opt.step()

    with torch.no_grad():
        pred_idx = clf(x_test).argmax(dim=1).numpy()
    pred = classes[pred_idx]
    return _probe_result(pred, y_test, len(y_train), "linear")


def knn_eval(features_train: FeatureTable, features_test: FeatureTable,
             k: int = 20) -> ProbeResult:
    """Cosine-similarity kNN vote; ties broken by summed similarity."""
    train = features_train.labeled()
    test = features_test.labeled()
    if k > len(train.ids):
        raise ParameterError(f"k={k} exceeds train size {len(train.ids)}")
    y_train = np.asarray(train.labels)
    y_test = np.asarray(test.labels)

    def unit(a):
        return a / (np.linalg.norm(a, axis=1, keepdims=True) + 1e-12)

    sim = unit(test.features) @ unit(train.features).T  # n_test x n_train
    pred = np.empty(len(y_test), dtype=y_train.dtype)
    for i, row in enumerate(sim):
        nn_idx = np.argpartition(-row, k - 1)[:k]
        votes: dict[int, tuple[int, float]] = {}
        for j in nn_idx:
            cls = int(y_train[j])
            count, total = votes.get(cls, (0, 0.0))
            votes[cls] = (count + 1, total + float(row[j]))
        pred[i] = max(votes.items(), key=lambda kv: (kv[1][0], kv[1][1]))[0]
    return _probe_result(pred, y_test, len(y_train), "knn")


def feature_std(table: FeatureTable, max_rows: int = 256) -> float:
    """Mean per-dimension standard deviation: the collapse sentinel."""
    rows = table.features[:max_rows]
    return float(rows.std(axis=0).mean())


def write_probe_report(result: ProbeResult, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(result.summary() + "\n")
        for cls, acc in sorted(result.per_class.items()):
            fh.write(f"class {cls}: {acc:.4f}\n")
