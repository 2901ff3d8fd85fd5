"""
Reference-quality metrics: SSIM and PSNR per frame, with a per-video report.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table
from scipy import ndimage

from errors import DimensionError, StorageError

logger = logging.getLogger(__name__)

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DYNAMIC_RANGE = 1.0
PSNR_CAP = 99.0


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Windowed weighted mean at every position where the window fits entirely."""
    r = window.shape[0] // 2
    full = ndimage.correlate(image, window, mode="constant", cval=0.0)
    return full[r:image.shape[0] - r, r:image.shape[1] - r]


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel images over the valid window positions."""
    window = gaussian_window()
    c1 = (K1 * DYNAMIC_RANGE) ** 2
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    var_x = _filter_valid(x * x, window) - mu_x * mu_x
    var_y = _filter_valid(y * y, window) - mu_y * mu_y
    cov = _filter_valid(x * y, window) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return numerator / denominator


def _check_pair(a: np.ndarray, b: np.ndarray, name: str):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two [3, H, W] images in [0, 1], averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b, "ssim")
    if a.ndim != 3 or min(a.shape[1:]) < WINDOW:
        raise DimensionError(f"ssim needs [C, H, W] images of at least {WINDOW}x{WINDOW}, got {a.shape}")
    return float(np.mean([ssim_map(a[c], b[c]).mean() for c in range(a.shape[0])]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1 / MSE) in dB, capped for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DYNAMIC_RANGE ** 2 / mse))


@dataclass
class MetricReport:
    ssim: List[float] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    def lines(self) -> List[str]:
        rows = ["frame\tssim\tpsnr"]
        rows += [f"{i}\t{s:.6f}\t{p:.4f}" for i, (s, p) in enumerate(zip(self.ssim, self.psnr))]
        rows.append(f"# summary frames={len(self.ssim)} mean_ssim={self.mean_ssim:.6f} "
                    f"mean_psnr={self.mean_psnr:.4f}")
        return rows

    def write(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write metric report {path}: {e}") from e
        return path

    def render(self, console: Console = None, title: str = "Video metrics"):
        table = Table(title=title)
        table.add_column("frame", justify="right")
        table.add_column("SSIM", justify="right")
        table.add_column("PSNR (dB)", justify="right")
        for i, (s, p) in enumerate(zip(self.ssim, self.psnr)):
            table.add_row(str(i), f"{s:.4f}", f"{p:.2f}")
        table.add_row("mean", f"{self.mean_ssim:.4f}", f"{self.mean_psnr:.2f}", style="bold")
        (console or Console()).print(table)


def evaluate_videos(generated: np.ndarray, reference: np.ndarray, threads: int = 1) -> MetricReport:
    """Per-frame SSIM and PSNR of two [3, T, H, W] videos."""
    _check_pair(generated, reference, "eval")
    if generated.ndim != 4:
        raise DimensionError(f"eval expects videos [3, T, H, W], got {generated.shape}")

    def measure(t: int) -> Tuple[float, float]:
        a, b = generated[:, t], reference[:, t]
        return ssim(a, b), psnr(a, b)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(measure, range(generated.shape[1])))
    report = MetricReport([s for s, _ in results], [p for _, p in results])
    logger.info(f"Evaluated {len(results)} frames: mean SSIM {report.mean_ssim:.4f}, "
                f"mean PSNR {report.mean_psnr:.2f} dB")
    return report
