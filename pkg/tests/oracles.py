"""Independent reference implementations used only by the tests.

Each one is written from the definition, in plain Python scalars, without
calling into the code path it checks.
"""
import math
from fractions import Fraction


def naive_conv2d(x, weights, bias, stride, pad, bn=None):
    """Direct six-deep loop cross-correlation in float64.

    ``x`` is (c, h, w), ``weights`` (o, c, kh, kw), both numpy arrays;
    ``bn`` is ``(gamma, beta, mean, var, eps)`` or None.
    """
    xs = x.tolist()
    ws = weights.tolist()
    c, h, w = x.shape
    o, _, kh, kw = weights.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = [[[0.0] * ow for _ in range(oh)] for _ in range(o)]
    for f in range(o):
        wf = ws[f]
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ch in range(c):
                    xc, wc = xs[ch], wf[ch]
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        row, wrow = xc[iy], wc[ky]
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < w:
                                acc += row[ix] * wrow[kx]
                if bn is None:
                    acc += float(bias[f])
                else:
                    gamma, beta, mean, var, eps = bn
                    acc = float(gamma[f]) * (acc - float(mean[f])) / math.sqrt(
                        float(var[f]) + eps
                    ) + float(beta[f])
                out[f][oy][ox] = acc
    return out


def scalar_sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_decode(tx, ty, tw, th, obj, class_logits, cx, cy, pw, ph, stride):
    """One prediction through the output transforms, in pixels."""
    bx = (scalar_sigmoid(tx) + cx) * stride
    by = (scalar_sigmoid(ty) + cy) * stride
    bw = pw * math.exp(tw)
    bh = ph * math.exp(th)
    p_obj = scalar_sigmoid(obj)
    scores = [p_obj * scalar_sigmoid(v) for v in class_logits]
    return (bx, by, bw, bh), p_obj, scores


def exhaustive_ap(scores, is_tp, n_gt):
    """AP by evaluating every confidence threshold cut, in exact rationals.

    For each distinct score ``t`` the cut keeps detections with score >= t.
    The interpolated precision at recall ``r`` is the best precision over
    cuts whose recall is at least ``r``; AP sums it over recall increments.
    """
    if n_gt == 0:
        return None
    points = []
    for t in sorted(set(scores), reverse=True):
        kept = [tp for s, tp in zip(scores, is_tp) if s >= t]
        tp = sum(1 for v in kept if v)
        points.append((Fraction(tp, n_gt), Fraction(tp, len(kept))))
    recalls = sorted({r for r, _ in points})
    ap = Fraction(0)
    prev = Fraction(0)
    for r in recalls:
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * best
        prev = r
    return ap


def corner_iou(a, b):
    """IoU of two corner boxes from first principles (overlap / combined)."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0
