"""Deterministic generators and loaders for the benchmark tasks.

Five tasks at configurable scale: digit addition and symbol memorization
(string-formatted with a '-' delimiter/pad symbol that is itself a target
class), byte-level language modeling over a text corpus, and sequential
(optionally pixel-permuted) MNIST read one pixel per timestep.

Every task exposes the same surface for the training loop: ``kind``,
``input_size``/``output_size``, ``carry_between_batches``,
``epoch_batches(epoch, rng, batch_size)`` and ``eval_batches(batch_size)``.
Generators are pure functions of their parameters and seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SequenceBatch
from .tensor import Tensor

PAD = "-"

# '-' first, then letters/digits/punctuation: enough distinct symbols for the
# 65-symbol preset
_MASTER_SYMBOLS = PAD + (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    "#@%&*+=?!"
)

# fixed so permuted-pixel runs are comparable across machines and sessions
PMNIST_PERMUTATION_SEED = 2017


@dataclass(frozen=True)
class SymbolVocab:
    """Ordered symbol set with one-hot width equal to its size."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.symbols.count(PAD) != 1:
            raise ValueError(f"vocabulary must contain {PAD!r} exactly once")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad_index(self) -> int:
        return self.symbols.index(PAD)

    def encode(self, text: str) -> Tensor:
        index = {s: i for i, s in enumerate(self.symbols)}
        return np.array([index[ch] for ch in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)


def make_vocab(size: int) -> SymbolVocab:
    if not 2 <= size <= len(_MASTER_SYMBOLS):
        raise ValueError(f"vocab size must be in [2, {len(_MASTER_SYMBOLS)}]")
    return SymbolVocab(tuple(_MASTER_SYMBOLS[:size]))


def one_hot(ids: Tensor, width: int) -> Tensor:
    return np.eye(width)[np.asarray(ids, dtype=np.int64)]


# -- string-formatted algorithmic tasks ---------------------------------------

def addition_strings(a: int, b: int, num_digits: int) -> tuple[str, str]:
    """Lay out one addition example.

    Input: '-' a '-' b '-' then pad; target: pad then the sum right-aligned
    in a (digits+1)-wide field and a trailing '-'. Both strings have length
    3 * digits + 4. Operands are written zero-padded to ``num_digits``.
    """
    field = num_digits + 1
    inp = f"{PAD}{a:0{num_digits}d}{PAD}{b:0{num_digits}d}{PAD}"
    inp += PAD * (field)
    tgt = PAD * (2 * (num_digits + 1)) + f"{a + b:{PAD}>{field}d}" + PAD
    return inp, tgt


def memorization_strings(payload: str) -> tuple[str, str]:
    """Input: '-' payload then pad; target: pad then payload '-'. Both
    strings have length 2 * len(payload) + 2."""
    n = len(payload)
    return PAD + payload + PAD * (n + 1), PAD * (n + 1) + payload + PAD


class GeneratedTask:
    """Common machinery for seeded sample generators with a fixed test set."""

    kind = "algorithmic"
    carry_between_batches = False

    def __init__(self, vocab: SymbolVocab, seed: int, test_samples: int) -> None:
        self.vocab = vocab
        self.seed = seed
        test_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE)))
        self._test = [self.sample(test_rng) for _ in range(test_samples)]

    @property
    def input_size(self) -> int:
        return self.vocab.size

    @property
    def output_size(self) -> int:
        return self.vocab.size

    def sample(self, rng: np.random.Generator) -> tuple[str, str]:
        raise NotImplementedError

    def _batch(self, pairs: list[tuple[str, str]]) -> SequenceBatch:
        inputs = np.stack([one_hot(self.vocab.encode(i), self.vocab.size) for i, _ in pairs])
        targets = np.stack([self.vocab.encode(t) for _, t in pairs])
        mask = np.ones(targets.shape, dtype=bool)
        return SequenceBatch(inputs=inputs, targets=targets, mask=mask)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> SequenceBatch:
        return self._batch([self.sample(rng) for _ in range(batch_size)])

    def epoch_batches(self, epoch: int, rng: np.random.Generator, batch_size: int):
        while True:
            yield self.sample_batch(rng, batch_size)

    def eval_batches(self, batch_size: int):
        for i in range(0, len(self._test), batch_size):
            yield self._batch(self._test[i : i + batch_size])


class AdditionTask(GeneratedTask):
    """Sum two uniformly drawn ``num_digits``-digit integers."""

    def __init__(self, num_digits: int = 4, seed: int = 0, test_samples: int = 100):
        self.num_digits = num_digits
        super().__init__(SymbolVocab(tuple(PAD + "0123456789")), seed, test_samples)

    def sample(self, rng: np.random.Generator) -> tuple[str, str]:
        hi = 10**self.num_digits
        a, b = int(rng.integers(hi)), int(rng.integers(hi))
        return addition_strings(a, b, self.num_digits)


class MemorizationTask(GeneratedTask):
    """Recall a sequence of random symbols after a delay."""

    def __init__(
        self,
        num_symbols: int = 6,
        vocab_size: int = 16,
        seed: int = 0,
        test_samples: int = 100,
    ):
        self.num_symbols = num_symbols
        super().__init__(make_vocab(vocab_size), seed, test_samples)

    def sample(self, rng: np.random.Generator) -> tuple[str, str]:
        ids = rng.integers(1, self.vocab.size, size=self.num_symbols)
        return memorization_strings(self.vocab.decode(ids))


# -- byte-level language modeling ----------------------------------------------

class CharLmTask:
    """Next-byte prediction over a corpus, folded into contiguous batch
    lanes of fixed-length subsequences; state carries across batches."""

    kind = "charlm"
    carry_between_batches = True

    def __init__(self, path, subseq_len: int = 50, val_fraction: float = 0.05):
        raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        if raw.size < 2:
            raise ValueError(f"corpus {path} is empty")
        self._byte_values = np.unique(raw)
        lut = np.zeros(256, dtype=np.int64)
        lut[self._byte_values] = np.arange(self._byte_values.size)
        ids = lut[raw]
        n_val = max(int(raw.size * val_fraction), subseq_len + 1)
        self._train_ids = ids[: raw.size - n_val]
        self._val_ids = ids[raw.size - n_val :]
        self.subseq_len = subseq_len

    @property
    def vocab_size(self) -> int:
        return int(self._byte_values.size)

    input_size = property(lambda self: self.vocab_size)
    output_size = property(lambda self: self.vocab_size)

    def _lane_batches(self, ids: Tensor, batch_size: int):
        lane_len = (ids.size - 1) // batch_size
        if lane_len < self.subseq_len:
            raise ValueError("corpus too small for this batch size")
        src = ids[: batch_size * lane_len].reshape(batch_size, lane_len)
        tgt = ids[1 : batch_size * lane_len + 1].reshape(batch_size, lane_len)
        v = self.vocab_size
        for t in range(0, lane_len - self.subseq_len + 1, self.subseq_len):
            window = slice(t, t + self.subseq_len)
            yield SequenceBatch(
                inputs=one_hot(src[:, window], v),
                targets=tgt[:, window],
                mask=np.ones((batch_size, self.subseq_len), dtype=bool),
            )

    def epoch_batches(self, epoch: int, rng: np.random.Generator, batch_size: int):
        return self._lane_batches(self._train_ids, batch_size)

    def eval_batches(self, batch_size: int):
        return self._lane_batches(self._val_ids, batch_size)


def synthesize_corpus(path, n_bytes: int = 1_200_000, seed: int = 0) -> Path:
    """Write a deterministic English-like text corpus: Zipf-distributed
    pseudo-words grouped into sentences and paragraphs."""
    rng = np.random.default_rng(seed)
    onsets = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch"]
    nuclei = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
    codas = ["", "", "n", "r", "s", "t", "l", "nd", "st"]
    words = []
    seen = set()
    while len(words) < 1500:
        n_syl = int(rng.integers(1, 4))
        w = "".join(
            onsets[rng.integers(len(onsets))]
            + nuclei[rng.integers(len(nuclei))]
            + codas[rng.integers(len(codas))]
            for _ in range(n_syl)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, len(words) + 1)
    probs = 1.0 / ranks
    probs /= probs.sum()
    chunks = []
    total = 0
    sentence_in_par = 0
    while total < n_bytes:
        n_words = int(rng.integers(4, 13))
        ws = [words[i] for i in rng.choice(len(words), size=n_words, p=probs)]
        sentence = " ".join(ws).capitalize() + ". "
        sentence_in_par += 1
        if sentence_in_par >= rng.integers(3, 7):
            sentence += "\n\n"
            sentence_in_par = 0
        chunks.append(sentence)
        total += len(sentence)
    path = Path(path)
    path.write_text("".join(chunks)[:n_bytes], encoding="ascii")
    return path


# -- sequential MNIST ------------------------------------------------------------

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True)
class PixelOrder:
    """A bijection on pixel indices; identity for scanline order."""

    permutation: Tensor

    def __post_init__(self) -> None:
        p = np.asarray(self.permutation)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ValueError("permutation must be a bijection on 0..n-1")

    @classmethod
    def scanline(cls, n_pixels: int) -> "PixelOrder":
        return cls(np.arange(n_pixels))

    @classmethod
    def permuted(cls, n_pixels: int, seed: int = PMNIST_PERMUTATION_SEED) -> "PixelOrder":
        return cls(np.random.default_rng(seed).permutation(n_pixels))


def load_idx_images(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise IOError(f"{path}: truncated IDX image file")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IOError(f"{path}: bad magic {magic}, expected {IDX_IMAGE_MAGIC}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if data.size != count * rows * cols:
        raise IOError(f"{path}: payload does not match header counts")
    return data.reshape(count, rows, cols)


def load_idx_labels(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IOError(f"{path}: truncated IDX label file")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IOError(f"{path}: bad magic {magic}, expected {IDX_LABEL_MAGIC}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if data.size != count:
        raise IOError(f"{path}: payload does not match header count")
    return data.astype(np.int64)


def downsample_images(images: Tensor, side: int = 8) -> Tensor:
    """Center-crop to a multiple of ``side`` and block-average."""
    n, rows, cols = images.shape
    block = min(rows, cols) // side
    crop = block * side
    r0, c0 = (rows - crop) // 2, (cols - crop) // 2
    x = images[:, r0 : r0 + crop, c0 : c0 + crop].astype(np.float64)
    return x.reshape(n, side, block, side, block).mean(axis=(2, 4))


class MnistTask:
    """Digit classification from one pixel intensity per timestep; the loss
    mask covers only the final position."""

    kind = "image"
    carry_between_batches = False

    def __init__(
        self,
        data_dir,
        order: PixelOrder | None = None,
        downsample: int | None = None,
        split: str = "train",
        train_size: int = 50000,
    ):
        d = Path(data_dir)
        if split in ("train", "val"):
            images = load_idx_images(d / "train-images-idx3-ubyte")
            labels = load_idx_labels(d / "train-labels-idx1-ubyte")
            if split == "train":
                images, labels = images[:train_size], labels[:train_size]
            else:
                images, labels = images[train_size:], labels[train_size:]
        elif split == "test":
            images = load_idx_images(d / "t10k-images-idx3-ubyte")
            labels = load_idx_labels(d / "t10k-labels-idx1-ubyte")
        else:
            raise ValueError(f"unknown split {split!r}")
        if downsample is not None:
            pixels = downsample_images(images, downsample) / 255.0
        else:
            pixels = images.astype(np.float64) / 255.0
        n = pixels.shape[0]
        flat = pixels.reshape(n, -1)
        self.order = order or PixelOrder.scanline(flat.shape[1])
        self._pixels = flat[:, self.order.permutation]
        self._labels = labels
        self._val_view: MnistTask | None = None

    @property
    def input_size(self) -> int:
        return 1

    @property
    def output_size(self) -> int:
        return 10

    @property
    def seq_len(self) -> int:
        return self._pixels.shape[1]

    def attach_eval(self, other: "MnistTask") -> "MnistTask":
        self._val_view = other
        return self

    def _batch(self, idx: Tensor) -> SequenceBatch:
        t = self.seq_len
        inputs = self._pixels[idx][:, :, None]
        targets = np.zeros((idx.size, t), dtype=np.int64)
        targets[:, -1] = self._labels[idx]
        mask = np.zeros((idx.size, t), dtype=bool)
        mask[:, -1] = True
        return SequenceBatch(inputs=inputs, targets=targets, mask=mask)

    def epoch_batches(self, epoch: int, rng: np.random.Generator, batch_size: int):
        order = rng.permutation(self._pixels.shape[0])
        for i in range(0, order.size - batch_size + 1, batch_size):
            yield self._batch(order[i : i + batch_size])

    def eval_batches(self, batch_size: int):
        source = self._val_view if self._val_view is not None else self
        n = source._pixels.shape[0]
        for i in range(0, n, batch_size):
            yield source._batch(np.arange(i, min(i + batch_size, n)))


# -- presets -----------------------------------------------------------------

TASK_PRESETS = {
    "addition-desk": {"task": "addition", "num_digits": 4},
    "addition-paper": {"task": "addition", "num_digits": 15},
    "memorization-desk": {"task": "memorization", "num_symbols": 6, "vocab_size": 16},
    "memorization-paper": {"task": "memorization", "num_symbols": 20, "vocab_size": 65},
    "charlm": {"task": "charlm"},
    "mnist": {"task": "mnist"},
    "mnist-desk8": {"task": "mnist", "downsample": 8},
    "pmnist": {"task": "mnist", "permute": True},
}


def make_task(spec: dict, seed: int = 0):
    """Build a task from a preset name plus overrides (see TASK_PRESETS)."""
    spec = dict(spec)
    preset = spec.pop("preset", None)
    if preset is not None:
        if preset not in TASK_PRESETS:
            raise ValueError(
                f"unknown task preset {preset!r}; choose from {sorted(TASK_PRESETS)}"
            )
        merged = dict(TASK_PRESETS[preset])
        merged.update(spec)
        spec = merged
    name = spec.pop("task")
    if name == "addition":
        return AdditionTask(num_digits=spec.pop("num_digits", 4), seed=seed,
                            test_samples=spec.pop("test_samples", 100))
    if name == "memorization":
        return MemorizationTask(
            num_symbols=spec.pop("num_symbols", 6),
            vocab_size=spec.pop("vocab_size", 16),
            seed=seed,
            test_samples=spec.pop("test_samples", 100),
        )
    if name == "charlm":
        return CharLmTask(
            spec.pop("path"),
            subseq_len=spec.pop("subseq_len", 50),
            val_fraction=spec.pop("val_fraction", 0.05),
        )
    if name == "mnist":
        data_dir = spec.pop("data_dir")
        downsample = spec.pop("downsample", None)
        n_pixels = spec.pop("n_pixels", (downsample or 28) ** 2)
        order = (
            PixelOrder.permuted(n_pixels, spec.pop("permutation_seed", PMNIST_PERMUTATION_SEED))
            if spec.pop("permute", False)
            else PixelOrder.scanline(n_pixels)
        )
        train_size = spec.pop("train_size", 50000)
        train = MnistTask(data_dir, order, downsample, split="train", train_size=train_size)
        val = MnistTask(data_dir, order, downsample, split="val", train_size=train_size)
        return train.attach_eval(val)
    raise ValueError(f"unknown task {name!r}")
