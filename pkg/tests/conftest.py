import numpy as np
import pytest

from app.geometry import CameraModel, default_rig
from app.tensor import CbrBlock


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def axis_camera():
    """R = I, T = 0, f = 500, principal point (352, 128) on a 256x704 image."""
    K = np.array([[500.0, 0.0, 352.0], [0.0, 500.0, 128.0], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, R=np.eye(3), T=np.zeros(3), h=1.0, height=256, width=704)


@pytest.fixture
def small_rig():
    return default_rig(height=64, width=128, focal=100.0)


def make_block(rng, out_ch, in_ch, k=3, stride=1, padding=1, bn=True):
    kwargs = {}
    if bn:
        kwargs = dict(
            gamma=rng.uniform(0.5, 1.5, out_ch),
            beta=rng.normal(0.0, 0.1, out_ch),
            running_mean=rng.normal(0.0, 0.1, out_ch),
            running_var=rng.uniform(0.5, 2.0, out_ch),
        )
    return CbrBlock(
        weight=rng.normal(size=(out_ch, in_ch, k, k)),
        bias=rng.normal(size=out_ch),
        stride=stride,
        padding=padding,
        **kwargs,
    )


def conv_reference(x, weight, bias, stride, padding):
    """Nested-loop cross-correlation."""
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for n in range(b):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = bias[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, ic, y * stride + i, xx * stride + j] * weight[oc, ic, i, j]
                    out[n, oc, y, xx] = acc
    return out


def bilinear_reference(img, sx, sy):
    """Zero-padded bilinear sample of a 2-D array at one point."""
    h, w = img.shape
    x0, y0 = int(np.ceil(sx)) - 1, int(np.ceil(sy)) - 1
    fx, fy = sx - x0, sy - y0

    def at(y, x):
        return img[y, x] if 0 <= y < h and 0 <= x < w else 0.0

    return (
        (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
        + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    )


@pytest.fixture
def small_overrides():
    """Desk-sized run config: one 64x128 camera ring, a 24 m BEV and short descents."""
    return {
        "scene": {"rays": 4096, "num_boxes": 4},
        "noise": {"sigma_rot_deg": 1.0, "sigma_trans_m": 0.1, "bev_shift_max": 3},
        "geometry": {
            "image_height": 64,
            "image_width": 128,
            "focal_length": 100.0,
            "depth_bound": [1.0, 10.0, 1.0],
            "x_bound": [-12.0, 12.0, 0.3],
            "y_bound": [-12.0, 12.0, 0.3],
        },
        "channels": {"c_cam": 4, "c_sk": 8, "c_ctx": 4, "c_lidar": 4},
        "local_align": {"k_graph": 8},
        "global_align": {"window": 32, "margin": 4, "optimizer": {"iterations": 15}},
        "bench": {"knn_sizes": [200, 800], "knn_queries": 32, "knn_extent": 64},
    }
