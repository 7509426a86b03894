"""
Topographic Maps

Turns per-electrode band powers into H x W x 3 images. Electrode positions
are projected to the scalp plane by dropping Z, triangulated once per
montage, and each band is interpolated with a C1 piecewise-cubic
Clough-Tocher surface. Pixels outside the electrode convex hull are zero.

Also holds the TEN1/LBL1 dataset formats and PNG export.
"""

import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import png
from scipy.spatial import ConvexHull, Delaunay

from eeg_io import Electrode
from spectral import BandPowerFrame

DEFAULT_IMAGE_SIZE = 32
GRID_MARGIN = 0.05
FLAT_CHANNEL_VALUE = 0.5
FLAT_RELATIVE_TOLERANCE = 1e-12

TENSOR_MAGIC = b"TEN1"
LABEL_MAGIC = b"LBL1"


class TopomapError(ValueError):
    """Raised for unusable montages or invalid interpolation input."""


class TensorFileError(ValueError):
    """Raised when a TEN1 or LBL1 file is corrupt or inconsistent."""


@dataclass(frozen=True, eq=False)
class GridLocation:
    simplex: np.ndarray
    barycentric: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        return self.simplex >= 0


class Montage2D:
    """
    Electrode positions on the scalp plane with their Delaunay triangulation.

    Everything that depends only on geometry is computed here once and shared
    read-only: the triangulation, the least-squares vertex gradient operator,
    the Clough-Tocher edge weights and the located pixel grids.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.triangulation = Delaunay(self.points)
        self.hull = ConvexHull(self.points).vertices
        self._check_triangles()
        self._gradient_operator = self._build_gradient_operator()
        self._edge_weights = self._build_edge_weights()
        self._grids: Dict[int, Tuple[np.ndarray, GridLocation]] = {}
        self._grid_lock = threading.Lock()

    @property
    def num_points(self) -> int:
        return len(self.points)

    @property
    def triangles(self) -> np.ndarray:
        return self.triangulation.simplices

    def _check_triangles(self) -> None:
        corners = self.points[self.triangles]
        u = corners[:, 1] - corners[:, 0]
        v = corners[:, 2] - corners[:, 0]
        areas = 0.5 * np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        span = np.ptp(self.points, axis=0).max()
        if np.any(areas <= 1e-14 * span * span):
            raise TopomapError("triangulation contains a degenerate triangle")

    def _build_gradient_operator(self) -> np.ndarray:
        # grads[i] = sum_n G[i, :, n] * f[n]: a least-squares plane fit over the 1-ring of vertex i.
        n = self.num_points
        indptr, indices = self.triangulation.vertex_neighbor_vertices
        operator = np.zeros((n, 2, n))
        for i in range(n):
            ring = indices[indptr[i]:indptr[i + 1]]
            pinv = np.linalg.pinv(self.points[ring] - self.points[i])
            operator[i][:, ring] += pinv
            operator[i, :, i] -= pinv.sum(axis=1)
        return operator

    def _build_edge_weights(self) -> np.ndarray:
        # Cross-edge derivative weights from where each neighbour's centroid
        # falls in this triangle's barycentric frame; -1/2 on the hull.
        tri = self.triangulation
        count = len(tri.simplices)
        weights = np.full((count, 3), -0.5)
        for k in range(3):
            neighbour = tri.neighbors[:, k]
            has = neighbour >= 0
            if not np.any(has):
                continue
            centroid = self.points[tri.simplices[neighbour[has]]].mean(axis=1)
            c = self._barycentric(np.nonzero(has)[0], centroid)
            c0, c1, c2 = c[:, 0], c[:, 1], c[:, 2]
            if k == 0:
                g = (2 * c2 + c1 - 1) / (2 - 3 * c2 - 3 * c1)
            elif k == 1:
                g = (2 * c0 + c2 - 1) / (2 - 3 * c0 - 3 * c2)
            else:
                g = (2 * c1 + c0 - 1) / (2 - 3 * c1 - 3 * c0)
            weights[has, k] = g
        return weights

    def _barycentric(self, simplex: np.ndarray, xy: np.ndarray) -> np.ndarray:
        transform = self.triangulation.transform[simplex]
        partial = np.einsum("tij,tj->ti", transform[:, :2, :], xy - transform[:, 2, :])
        return np.column_stack([partial, 1.0 - partial.sum(axis=1)])

    def locate(self, xy: np.ndarray) -> GridLocation:
        """Containing triangle (-1 outside the hull) and barycentric coordinates of each point."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        simplex = self.triangulation.find_simplex(xy)
        barycentric = np.zeros((len(xy), 3))
        inside = simplex >= 0
        if np.any(inside):
            barycentric[inside] = self._barycentric(simplex[inside], xy[inside])
        return GridLocation(simplex=simplex, barycentric=barycentric)

    def grid_coordinates(self, size: int) -> np.ndarray:
        """
        Pixel centre coordinates [size, size, 2] of the square image frame.

        The frame is the bounding box of the projected electrodes, padded on
        its shorter axis to a square and widened by a 5% margin on each side.
        Row 0 is the largest y, column 0 the smallest x.
        """
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        centre = (lo + hi) / 2
        span = (hi - lo).max()
        half = span / 2 + GRID_MARGIN * span
        xs = np.linspace(centre[0] - half, centre[0] + half, size)
        ys = np.linspace(centre[1] + half, centre[1] - half, size)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def grid(self, size: int) -> Tuple[np.ndarray, GridLocation]:
        with self._grid_lock:
            if size not in self._grids:
                coords = self.grid_coordinates(size)
                self._grids[size] = (coords, self.locate(coords.reshape(-1, 2)))
            return self._grids[size]

    def vertex_gradients(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("idn,nb->idb", self._gradient_operator, values)


@dataclass(frozen=True, eq=False)
class TopoImage:
    """Pixels [H, W, 3] in [0, 1], channels (theta, alpha, gamma)."""

    pixels: np.ndarray
    label: int


def project_montage(electrodes: Sequence[Electrode]) -> Montage2D:
    """
    Drop Z from electrode positions and triangulate the scalp plane.

    Args:
        electrodes: Montage electrodes

    Returns:
        Montage2D over the projected (x, y) points
    """
    if len(electrodes) < 4:
        raise TopomapError(f"need at least 4 electrodes, got {len(electrodes)}")
    points = np.array([[e.x, e.y] for e in electrodes], dtype=np.float64)
    if len(np.unique(points, axis=0)) != len(points):
        raise TopomapError("duplicate projected position")
    if np.linalg.matrix_rank(points - points.mean(axis=0)) < 2:
        raise TopomapError("all electrode positions are collinear")

    montage = Montage2D(points)
    logging.info(f"Built montage: {montage.num_points} electrodes, {len(montage.triangles)} triangles")
    return montage


class CloughTocherSurface:
    """
    C1 piecewise-cubic interpolant over a montage triangulation.

    Each triangle is split at its centroid into three cubic Bezier patches.
    Vertex gradients come from the montage's 1-ring least-squares fit, so
    fields linear in (x, y) are reproduced exactly. Values may carry a
    trailing axis, interpolating several fields at once.
    """

    def __init__(self, montage: Montage2D, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != montage.num_points:
            raise TopomapError(f"got {values.shape[0]} values for {montage.num_points} electrodes")
        if not np.all(np.isfinite(values)):
            raise TopomapError("non-finite value")
        self.montage = montage
        self._squeeze = values.ndim == 1
        self._coefficients = self._build_coefficients(values.reshape(montage.num_points, -1))

    def _build_coefficients(self, f: np.ndarray) -> Dict[str, np.ndarray]:
        m = self.montage
        tri = m.triangles
        grads = m.vertex_gradients(f)
        p1, p2, p3 = (m.points[tri[:, k]] for k in range(3))
        f1, f2, f3 = (f[tri[:, k]] for k in range(3))
        g1, g2, g3 = (grads[tri[:, k]] for k in range(3))
        e12, e23, e31 = p2 - p1, p3 - p2, p1 - p3

        def along(g, e):
            return np.einsum("tdb,td->tb", g, e)

        c = {"3000": f1, "0300": f2, "0030": f3}
        c["2100"] = c["3000"] + along(g1, e12) / 3
        c["2010"] = c["3000"] - along(g1, e31) / 3
        c["1200"] = c["0300"] - along(g2, e12) / 3
        c["0210"] = c["0300"] + along(g2, e23) / 3
        c["1020"] = c["0030"] + along(g3, e31) / 3
        c["0120"] = c["0030"] - along(g3, e23) / 3

        c["2001"] = (c["2100"] + c["2010"] + c["3000"]) / 3
        c["0201"] = (c["1200"] + c["0300"] + c["0210"]) / 3
        c["0021"] = (c["1020"] + c["0120"] + c["0030"]) / 3

        w = m._edge_weights[:, :, None]
        c["0111"] = (w[:, 0] * (-c["0300"] + 3 * c["0210"] - 3 * c["0120"] + c["0030"])
                     + (-c["0300"] + 2 * c["0210"] - c["0120"] + c["0021"] + c["0201"])) / 2
        c["1011"] = (w[:, 1] * (-c["0030"] + 3 * c["1020"] - 3 * c["2010"] + c["3000"])
                     + (-c["0030"] + 2 * c["1020"] - c["2010"] + c["2001"] + c["0021"])) / 2
        c["1101"] = (w[:, 2] * (-c["3000"] + 3 * c["2100"] - 3 * c["1200"] + c["0300"])
                     + (-c["3000"] + 2 * c["2100"] - c["1200"] + c["2001"] + c["0201"])) / 2

        c["1002"] = (c["1101"] + c["1011"] + c["2001"]) / 3
        c["0102"] = (c["1101"] + c["0111"] + c["0201"]) / 3
        c["0012"] = (c["1011"] + c["0111"] + c["0021"]) / 3
        c["0003"] = (c["1002"] + c["0102"] + c["0012"]) / 3
        return c

    def evaluate(self, location: GridLocation) -> np.ndarray:
        """Interpolated values at located points; zero outside the hull."""
        inside = location.inside
        bands = next(iter(self._coefficients.values())).shape[1]
        out = np.zeros((len(location.simplex), bands))
        if np.any(inside):
            s = location.simplex[inside]
            b = location.barycentric[inside]
            out[inside] = self._bernstein(s, b)
        return out[:, 0] if self._squeeze else out

    def _bernstein(self, s: np.ndarray, b: np.ndarray) -> np.ndarray:
        # Extended barycentric coordinates inside the centroid sub-triangle:
        # the smallest coordinate becomes zero and moves to the centroid weight.
        minval = b.min(axis=1)
        b1, b2, b3 = (b[:, k] - minval for k in range(3))
        b4 = 3 * minval
        coords = (b1, b2, b3, b4)

        total = 0.0
        for key, coef in self._coefficients.items():
            powers = [int(ch) for ch in key]
            weight = _MULTINOMIAL[key]
            term = np.ones_like(b1)
            for coord, power in zip(coords, powers):
                if power:
                    term = term * coord ** power
            total = total + (weight * term)[:, None] * coef[s]
        return total

    def __call__(self, xy) -> np.ndarray:
        return self.evaluate(self.montage.locate(xy))


_MULTINOMIAL = {
    "3000": 1, "0300": 1, "0030": 1, "0003": 1,
    "2100": 3, "2010": 3, "1200": 3, "0210": 3, "1020": 3, "0120": 3,
    "2001": 3, "0201": 3, "0021": 3, "1002": 3, "0102": 3, "0012": 3,
    "1101": 6, "1011": 6, "0111": 6,
}


def interpolate_grid(m: Montage2D, values, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """
    Interpolate per-electrode values onto the montage's square pixel grid.

    Args:
        m: Projected montage
        values: One value per electrode, optionally with a trailing field axis
        size: Grid side length in pixels

    Returns:
        Field [size, size] (or [size, size, fields]); zero outside the hull
    """
    surface = CloughTocherSurface(m, values)
    _, location = m.grid(size)
    field = surface.evaluate(location)
    return field.reshape((size, size) + field.shape[1:])


def render_image(m: Montage2D, frame: BandPowerFrame, size: int = DEFAULT_IMAGE_SIZE) -> TopoImage:
    """
    Render one band-power frame as a normalised three-channel image.

    Each band is interpolated independently and min-max normalised over its
    in-hull pixels; a flat band maps to 0.5. Out-of-hull pixels stay 0.

    Args:
        m: Projected montage
        frame: Band powers, one row per electrode
        size: Image side length in pixels

    Returns:
        TopoImage carrying the frame's label
    """
    if frame.num_electrodes != m.num_points:
        raise TopomapError(f"frame has {frame.num_electrodes} electrodes, montage has {m.num_points}")
    field = interpolate_grid(m, frame.powers, size)
    _, location = m.grid(size)
    inside = location.inside.reshape(size, size)

    pixels = np.zeros((size, size, field.shape[-1]))
    for channel in range(field.shape[-1]):
        values = field[..., channel][inside]
        lo, hi = values.min(), values.max()
        if hi - lo <= FLAT_RELATIVE_TOLERANCE * max(abs(lo), abs(hi)):
            pixels[..., channel][inside] = FLAT_CHANNEL_VALUE
        else:
            pixels[..., channel][inside] = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return TopoImage(pixels=pixels, label=frame.label)


# TEN1 / LBL1 files

def write_ten1(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def read_ten1(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise TensorFileError(f"{path} is not a TEN1 tensor file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    header_size = 8 + 4 * ndim
    if len(data) < header_size:
        raise TensorFileError(f"truncated tensor header in {path}")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - header_size != expected:
        raise TensorFileError(
            f"tensor payload size mismatch in {path}: {len(data) - header_size} bytes for dims {list(dims)}"
        )
    if expected == 0:
        return np.zeros(dims, dtype="<f4")
    return np.frombuffer(data, dtype="<f4", offset=header_size).reshape(dims)


def write_lbl1(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise TensorFileError(f"labels must fit in u32, got range [{labels.min()}, {labels.max()}]")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<I", len(labels)))
        f.write(labels.tobytes())


def read_lbl1(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != LABEL_MAGIC:
        raise TensorFileError(f"{path} is not an LBL1 label file")
    (count,) = struct.unpack_from("<I", data, 4)
    if len(data) - 8 != 4 * count:
        raise TensorFileError(f"label count mismatch in {path}: header says {count}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return np.frombuffer(data, dtype="<u4", offset=8).astype(np.int64)


def export_tensor(images: List[TopoImage], data_path, labels_path) -> None:
    """
    Write images as one TEN1 tensor [N, H, W, 3] plus an LBL1 label file.

    Args:
        images: Rendered images, all of one shape
        data_path: TEN1 output path
        labels_path: LBL1 output path
    """
    if not images:
        raise TopomapError("no images to export")
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise TopomapError(f"mixed image shapes: {sorted(shapes)}")
    try:
        write_ten1(data_path, np.stack([img.pixels for img in images]))
        write_lbl1(labels_path, [img.label for img in images])
    except OSError as e:
        logging.error(f"Error exporting image tensor: {str(e)}")
        raise
    logging.info(f"Exported {len(images)} images to {data_path} and {labels_path}")


def import_tensor(data_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a TEN1 image tensor and its LBL1 labels, checking they agree in count."""
    data = read_ten1(data_path)
    labels = read_lbl1(labels_path)
    if data.ndim != 4 or data.shape[0] != len(labels):
        raise TensorFileError(
            f"{data_path} holds dims {list(data.shape)} but {labels_path} has {len(labels)} labels"
        )
    return data, labels


def export_png(img: TopoImage, path) -> None:
    """8-bit RGB PNG with R=theta, G=alpha, B=gamma, byte = floor(255 * pixel + 0.5)."""
    height, width, channels = img.pixels.shape
    if channels != 3:
        raise TopomapError(f"PNG export needs 3 channels, got {channels}")
    rows = np.floor(np.clip(img.pixels, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    writer = png.Writer(width=width, height=height, greyscale=False, bitdepth=8)
    try:
        with open(path, "wb") as f:
            writer.write(f, rows.reshape(height, width * 3).tolist())
    except OSError as e:
        logging.error(f"Error writing PNG {path}: {str(e)}")
        raise
