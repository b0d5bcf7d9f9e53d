import hashlib
import json
import math
import shlex
import subprocess
import tempfile
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.config import get_settings
from src.errors import ManifestError, ProviderError, ShapeMismatchError, UnmeasuredSignatureError
from src.models.graph_models import ChannelGroup, LayerKind, ModelGraph, Port, Signature
from src.models.latency_models import AnalyticalModelParams, BenchmarkProtocol
from src.tools.graph_ir import build_channel_groups, infer_shapes, kernel_size, port_groups, topological_order
from src.tools.model_io import save_model
from src.utils import logger

# Load application settings
settings = get_settings()


class LatencyProvider(ABC):
    """
    Latency oracle: measure(model, signature) -> milliseconds. Calls are serialized
    through one lock per provider, since a device benchmarks one model at a time.
    """
    name = "provider"
    consumes_model = False # True when measure() needs the materialized pruned model

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def measure(self, model: Optional[ModelGraph], signature: Signature, protocol: Optional[BenchmarkProtocol] = None) -> float:
        protocol = protocol or BenchmarkProtocol.exploration()
        with self._lock:
            self.calls += 1
            ms = self._measure(model, signature, protocol)
        if not math.isfinite(ms) or ms <= 0:
            logger.error(f"{self.name} returned a non-positive latency {ms} for {signature}")
            raise ProviderError(f"{self.name} returned a non-positive latency {ms} for {signature}")
        logger.debug(f"{self.name}: {signature} -> {ms:.6f} ms")
        return float(ms)

    @abstractmethod
    def _measure(self, model: Optional[ModelGraph], signature: Signature, protocol: BenchmarkProtocol) -> float:
        ...

    @abstractmethod
    def fingerprint_params(self) -> Dict[str, Any]:
        ...


def _layer_terms(model: ModelGraph, groups: List[ChannelGroup]) -> List[Tuple[str, int, int, int]]:
    """(kind, input group, output group, spatial factor) for every Dense/Conv2d layer."""
    owners = port_groups(groups)
    shapes = infer_shapes(model)
    terms = []
    for layer in topological_order(model):
        if not layer.is_prunable:
            continue
        spatial = 1
        if layer.kind == LayerKind.CONV2D.value:
            kh, kw = kernel_size(layer.params)
            _, h_out, w_out = shapes[layer.id]
            spatial = h_out * w_out * kh * kw
        terms.append((layer.kind, owners[(layer.id, Port.INPUT)], owners[(layer.id, Port.OUTPUT)], spatial))
    return terms


def _analytical_sum(terms, signature: Signature, params: AnalyticalModelParams) -> float:
    a, alpha = params.align, params.slant
    total = params.base_ms
    for kind, group_in, group_out, spatial in terms:
        c_in, c_out = signature[group_in], signature[group_out]
        aligned = a * a * math.ceil(c_out / a) * math.ceil(c_in / a)
        work = (alpha * c_out * c_in + (1.0 - alpha) * aligned) * spatial
        kappa = params.kappa_conv if kind == LayerKind.CONV2D.value else params.kappa_dense
        total += params.layer_overhead_ms + kappa * work
    return total


def analytical_measure(model: ModelGraph, signature: Signature, params: Optional[AnalyticalModelParams] = None) -> float:
    """
    Staircase cost model: channel counts are rounded up to the alignment `a`, with a
    linear share `slant` so the steps are slanted. c_in/c_out come from the signature.
    """
    groups = build_channel_groups(model)
    if len(signature) != len(groups):
        raise ShapeMismatchError(f"signature has {len(signature)} entries, the model has {len(groups)} groups")
    return _analytical_sum(_layer_terms(model, groups), signature, params or AnalyticalModelParams())


class AnalyticalLatencyProvider(LatencyProvider):
    """Analytical provider bound to one root architecture; only the signature varies."""
    name = "analytical"

    def __init__(self, root: ModelGraph, params: Optional[AnalyticalModelParams] = None):
        super().__init__()
        self.params = params or AnalyticalModelParams()
        self.groups = build_channel_groups(root)
        self._terms = _layer_terms(root, self.groups)
        logger.info(f"AnalyticalLatencyProvider initialized: {self.params.model_dump()}")

    def _measure(self, model, signature, protocol):
        if len(signature) != len(self.groups):
            raise ShapeMismatchError(f"signature has {len(signature)} entries, the model has {len(self.groups)} groups")
        return _analytical_sum(self._terms, signature, self.params)

    def fingerprint_params(self):
        return {"kind": self.name, **self.params.model_dump()}


def load_replay_table(path: Path) -> Dict[Tuple[int, ...], float]:
    """
    Reads line-delimited {"signature": [...], "ms": x} records. Cache files qualify:
    their fingerprint header is skipped, and so is a truncated last line.
    """
    table: Dict[Tuple[int, ...], float] = {}
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            if number == len(lines):
                logger.warning(f"Ignoring truncated last record of {path}")
                continue
            raise ManifestError(f"{path}:{number}: malformed replay record")
        if "fingerprint" in record:
            continue
        table.setdefault(tuple(int(c) for c in record["signature"]), float(record["ms"]))
    return table


def save_replay_table(table: Dict[Tuple[int, ...], float], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for counts, ms in table.items():
            f.write(json.dumps({"signature": list(counts), "ms": ms}) + "\n")
    logger.info(f"Saved replay table with {len(table)} entries to {path}")
    return path


class ReplayLatencyProvider(LatencyProvider):
    """Answers only from recorded whole-model measurements; no interpolation."""
    name = "replay"

    def __init__(self, table: Dict[Tuple[int, ...], float]):
        super().__init__()
        self.table = {tuple(k): float(v) for k, v in table.items()}

    @classmethod
    def from_file(cls, path: Path) -> "ReplayLatencyProvider":
        provider = cls(load_replay_table(path))
        logger.info(f"ReplayLatencyProvider loaded {len(provider.table)} measurements from {path}")
        return provider

    def _measure(self, model, signature, protocol):
        try:
            return self.table[tuple(signature.counts)]
        except KeyError:
            raise UnmeasuredSignatureError(signature.counts)

    def fingerprint_params(self):
        digest = hashlib.sha256(json.dumps(sorted(self.table.items())).encode()).hexdigest()
        return {"kind": self.name, "table": digest}


class ExternalCommandProvider(LatencyProvider):
    """
    Benchmarks on real hardware through a command template. The pruned model is written
    to a temporary file; {model_path}, {warmup} and {iters} are substituted and the
    command must print one decimal number of milliseconds on stdout.
    """
    name = "command"
    consumes_model = True

    def __init__(self, template: str, timeout_s: Optional[float] = None):
        super().__init__()
        self.template = template
        self.timeout_s = timeout_s if timeout_s is not None else settings.EXTERNAL_TIMEOUT_S

    def _command(self, model_path: Path, protocol: BenchmarkProtocol) -> List[str]:
        """Substitutes only the known placeholders; any other braces reach the command verbatim."""
        values = {"{model_path}": str(model_path), "{warmup}": str(protocol.warmup_iters),
                  "{iters}": str(protocol.measure_iters)}
        try:
            parts = shlex.split(self.template)
        except ValueError as e:
            raise ProviderError(f"bad command template '{self.template}': {e}")
        for placeholder, value in values.items():
            parts = [part.replace(placeholder, value) for part in parts]
        return parts

    def _measure(self, model, signature, protocol):
        if model is None:
            raise ProviderError("the external provider needs the pruned model")
        with tempfile.TemporaryDirectory(prefix="archtree_") as tmp:
            model_path = save_model(model, Path(tmp) / "model.json")
            command = self._command(model_path, protocol)
            try:
                completed = subprocess.run(command, capture_output=True, text=True, timeout=self.timeout_s)
            except subprocess.TimeoutExpired:
                logger.error(f"Benchmark command timed out after {self.timeout_s}s: {command}")
                raise ProviderError(f"benchmark command timed out after {self.timeout_s}s")
            except OSError as e:
                logger.error(f"Could not start benchmark command {command}: {e}")
                raise ProviderError(f"could not start benchmark command: {e}")
        if completed.returncode != 0:
            logger.error(f"Benchmark command exited with {completed.returncode}: {completed.stderr.strip()}")
            raise ProviderError(f"benchmark command exited with status {completed.returncode}", completed.stderr)
        output = completed.stdout.strip()
        try:
            return float(output)
        except ValueError:
            raise ProviderError(f"benchmark command printed '{output[:80]}', expected one number of milliseconds")

    def fingerprint_params(self):
        return {"kind": self.name, "template": self.template}


class NoisyLatencyProvider(LatencyProvider):
    """Multiplies another provider's answers by (1 + eps), eps ~ N(0, sigma). Robustness tests only."""
    name = "noisy"

    def __init__(self, inner: LatencyProvider, sigma: float, seed: int = 0):
        super().__init__()
        self.inner, self.sigma = inner, sigma
        self.consumes_model = inner.consumes_model
        self._rng = np.random.default_rng(seed)
        logger.warning(f"Latency noise enabled (sigma={sigma}); the latency budget is only guaranteed for noise-free providers")

    def _measure(self, model, signature, protocol):
        ms = self.inner.measure(model, signature, protocol)
        return max(ms * (1.0 + self.sigma * self._rng.standard_normal()), 1e-6 * ms)

    def fingerprint_params(self):
        return {"kind": self.name, "sigma": self.sigma, "inner": self.inner.fingerprint_params()}


def make_provider(spec: str, root: ModelGraph, noise_sigma: float = 0.0, seed: int = 0,
                  params: Optional[AnalyticalModelParams] = None) -> LatencyProvider:
    """'analytical' | 'replay:<file>' | 'command:<template>'."""
    if spec == "analytical":
        provider: LatencyProvider = AnalyticalLatencyProvider(root, params)
    elif spec.startswith("replay:"):
        provider = ReplayLatencyProvider.from_file(Path(spec.split(":", 1)[1]))
    elif spec.startswith("command:"):
        provider = ExternalCommandProvider(spec.split(":", 1)[1])
    else:
        raise ManifestError(f"unknown provider '{spec}' (expected analytical, replay:<file> or command:<template>)")
    if noise_sigma > 0:
        provider = NoisyLatencyProvider(provider, noise_sigma, seed)
    return provider
