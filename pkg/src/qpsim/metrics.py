"""Tracking-quality metrics and success-rate accounting.

Conventions: quaternions are unit wxyz and sign-canonicalized per frame
before comparison (q and -q are the same rotation), positions are meters.
Reported units follow the conventional tables: rotation both as the raw
quaternion-dot score and in degrees, translation in cm, keypoint error in
mm, chamfer distance in mm.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

# Success threshold sets, (rotation deg, translation cm, keypoint error cm).
# The first two are the standard pair; the 20-20-20 set is an extra, looser
# band kept for coverage — pass your own sets to drop it.
DEFAULT_THRESHOLD_SETS = (
    (10.0, 10.0, 10.0),
    (15.0, 15.0, 15.0),
    (20.0, 20.0, 20.0),
)


def _check_lengths(a, b):
    if len(a) != len(b):
        raise ValueError(f"trajectories have {len(a)} and {len(b)} frames")


def _canonical_dots(q, q_ref):
    q = np.asarray(q, dtype=np.float64)
    q_ref = np.asarray(q_ref, dtype=np.float64)
    _check_lengths(q, q_ref)
    dots = np.sum(q * q_ref, axis=-1)
    return np.abs(dots)


def rotation_error(q, q_ref):
    """(raw, degrees): raw is the mean canonicalized quaternion-dot score
    (1/N) sum(1 - |q_n . q̂_n|), in [0, 2]; degrees is the mean geodesic
    rotation angle."""
    dots = _canonical_dots(q, q_ref)
    raw = float(np.mean(1.0 - dots))
    angles = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
    return raw, float(np.degrees(np.mean(angles)))


def translation_error(t, t_ref):
    """Mean per-frame object position error, cm."""
    t = np.asarray(t, dtype=np.float64)
    t_ref = np.asarray(t_ref, dtype=np.float64)
    _check_lengths(t, t_ref)
    return float(np.mean(np.linalg.norm(t - t_ref, axis=-1))) * 100.0


def mpjpe(kp, kp_ref):
    """Mean per-keypoint position error across all frames, mm."""
    kp = np.asarray(kp, dtype=np.float64)
    kp_ref = np.asarray(kp_ref, dtype=np.float64)
    _check_lengths(kp, kp_ref)
    if kp.shape != kp_ref.shape:
        raise ValueError(f"keypoint shapes differ: {kp.shape} vs {kp_ref.shape}")
    if kp.shape[-2] == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(kp - kp_ref, axis=-1))) * 1000.0


def chamfer(cloud_a, cloud_b):
    """Symmetric chamfer distance between per-frame point clouds, mm.

    Mean of both directed nearest-neighbor means, averaged over frames, so
    chamfer(a, b) == chamfer(b, a) by construction.
    """
    a = np.asarray(cloud_a, dtype=np.float64)
    b = np.asarray(cloud_b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    _check_lengths(a, b)
    per_frame = np.empty(len(a))
    for n in range(len(a)):
        d = np.linalg.norm(a[n][:, None, :] - b[n][None, :, :], axis=-1)
        per_frame[n] = 0.5 * (np.mean(np.min(d, axis=1)) + np.mean(np.min(d, axis=0)))
    return float(np.mean(per_frame)) * 1000.0


# ------------------------------------------------------------ success sets


def success_flags(r_deg, t_cm, kp_mm, sets=DEFAULT_THRESHOLD_SETS):
    """Per threshold set: True iff rotation (deg), translation (cm), and
    keypoint error are each below the set's bounds. Keypoint bounds are
    given in cm to match the set naming and compared against mm values."""
    return tuple(
        bool(r_deg < s_deg and t_cm < s_cm and kp_mm < s_kp * 10.0)
        for s_deg, s_cm, s_kp in sets
    )


def success_rate(r_deg, t_cm, kp_mm, sets=DEFAULT_THRESHOLD_SETS):
    """Fraction of sequences passing each threshold set.

    Inputs are per-sequence arrays; returns one fraction per set.
    """
    r_deg = np.asarray(r_deg, dtype=np.float64)
    t_cm = np.asarray(t_cm, dtype=np.float64)
    kp_mm = np.asarray(kp_mm, dtype=np.float64)
    if not (len(r_deg) == len(t_cm) == len(kp_mm)):
        raise ValueError("per-sequence metric arrays differ in length")
    out = []
    for s_deg, s_cm, s_kp in sets:
        ok = (r_deg < s_deg) & (t_cm < s_cm) & (kp_mm < s_kp * 10.0)
        out.append(float(np.mean(ok)) if len(ok) else 0.0)
    return np.asarray(out)


# -------------------------------------------------------------- reporting


@dataclasses.dataclass(frozen=True)
class SequenceMetrics:
    sequence_id: str
    r_raw: float
    r_deg: float
    t_cm: float
    mpjpe_mm: float
    cd_mm: float
    successes: tuple[bool, ...]


def evaluate_sequence(
    sequence_id: str,
    quat, pos, keypoints,
    quat_ref, pos_ref, keypoints_ref,
    cloud=None, cloud_ref=None,
    sets=DEFAULT_THRESHOLD_SETS,
) -> SequenceMetrics:
    """All metrics for one tracked sequence against its reference."""
    r_raw, r_deg = rotation_error(quat, quat_ref)
    t_cm = translation_error(pos, pos_ref)
    kp_mm = mpjpe(keypoints, keypoints_ref)
    cd_mm = chamfer(cloud, cloud_ref) if cloud is not None else 0.0
    return SequenceMetrics(
        sequence_id=sequence_id, r_raw=r_raw, r_deg=r_deg, t_cm=t_cm,
        mpjpe_mm=kp_mm, cd_mm=cd_mm,
        successes=success_flags(r_deg, t_cm, kp_mm, sets),
    )


def write_metrics_csv(path: str, rows, sets=DEFAULT_THRESHOLD_SETS) -> None:
    """One row per sequence: id, rotation raw/deg, translation cm, keypoint
    mm, chamfer mm, then one success flag column per threshold set."""
    names = [f"success_{int(a)}_{int(b)}_{int(c)}" for a, b, c in sets]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["sequence_id", "R_err_raw", "R_err_deg", "T_err_cm",
             "MPJPE_mm", "CD_mm", *names]
        )
        for r in rows:
            w.writerow(
                [r.sequence_id, f"{r.r_raw:.9g}", f"{r.r_deg:.9g}",
                 f"{r.t_cm:.9g}", f"{r.mpjpe_mm:.9g}", f"{r.cd_mm:.9g}",
                 *(int(s) for s in r.successes)]
            )
