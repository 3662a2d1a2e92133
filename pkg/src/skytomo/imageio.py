"""Image files: portable float maps and 16-bit PNGs, one file per camera and channel."""

from pathlib import Path

import numpy as np
from PIL import Image

from .scene import CHANNELS


def image_name(camera: int, channel: int, ext: str = "pfm") -> str:
    return f"cam{camera}_{CHANNELS[channel]}.{ext}"


def write_pfm(path, image: np.ndarray) -> Path:
    """Single-channel little-endian PFM; rows are stored bottom-up as the format requires."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2-D image")
    path = Path(path)
    with path.open("wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())
    return path


def read_pfm(path) -> np.ndarray:
    with Path(path).open("rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * chans)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_png16(path, image: np.ndarray) -> Path:
    """Graylevel image as a 16-bit PNG (values clipped to [0, 65535])."""
    img = np.clip(np.round(np.asarray(image, dtype=float)), 0, 65535).astype(np.uint16)
    path = Path(path)
    Image.fromarray(img).save(path)
    return path


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64)


def write_images(out_dir, images: dict, fmt: str = "pfm") -> list[Path]:
    """Write {channel: (n_cams, npy, npx)} as one file per camera and channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = write_pfm if fmt == "pfm" else write_png16
    paths = []
    for ch, stack in sorted(images.items()):
        for c, img in enumerate(stack):
            paths.append(writer(out_dir / image_name(c, ch, fmt), img))
    return paths


def read_images(in_dir, n_cams: int | None = None, fmt: str = "pfm") -> dict:
    """Inverse of ``write_images``; channels without files are skipped."""
    in_dir = Path(in_dir)
    reader = read_pfm if fmt == "pfm" else read_png16
    out = {}
    for ch in range(len(CHANNELS)):
        stack = []
        c = 0
        while (n_cams is None or c < n_cams) and (in_dir / image_name(c, ch, fmt)).exists():
            stack.append(reader(in_dir / image_name(c, ch, fmt)))
            c += 1
        if stack:
            if n_cams is not None and len(stack) != n_cams:
                raise ValueError(f"channel {CHANNELS[ch]}: found {len(stack)} of {n_cams} camera images")
            out[ch] = np.stack(stack)
    if not out:
        raise FileNotFoundError(f"no cam*_{{R,G,B}}.{fmt} images in {in_dir}")
    return out
