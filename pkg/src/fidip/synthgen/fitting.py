"""Lifting 2D keypoints to body pose/shape by minimising a SMPLify-style fitting objective."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import minimize

from ..core import ConfigError, JointMap, KeypointAnnotation
from .kinematics import BodyModel, BodyPoseParams, CameraParams, NUM_SHAPE, default_body, \
    forward_kinematics_torch, project_pinhole

logger = logging.getLogger(__name__)

MIN_LABELED_JOINTS = 6


class FittingError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class PosePrior:
    """Gaussian mixture over body pose (root excluded), Gaussian shape prior, bend components."""

    weights: np.ndarray  # M
    means: np.ndarray  # M x 3K
    covariances: np.ndarray  # M x 3K x 3K
    shape_mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_SHAPE))
    shape_covariance: np.ndarray = field(default_factory=lambda: np.eye(NUM_SHAPE))
    bend_components: tuple = ()  # (theta index, sign)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            len(self.weights), self.means.shape[1], self.means.shape[1])
        self.shape_mean = np.asarray(self.shape_mean, dtype=np.float64)
        self.shape_covariance = np.asarray(self.shape_covariance, dtype=np.float64)
        if not np.isclose(self.weights.sum(), 1.0) or np.any(self.weights < 0):
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        try:
            chol = [np.linalg.cholesky(c) for c in self.covariances]
            np.linalg.cholesky(self.shape_covariance)
        except np.linalg.LinAlgError:
            raise ConfigError("prior covariance is singular or not positive definite") from None
        self.precisions = np.stack([np.linalg.inv(c) for c in self.covariances])
        self.log_dets = np.array([2 * np.log(np.diag(L)).sum() for L in chol])
        self.shape_precision = np.linalg.inv(self.shape_covariance)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def neg_log_density(self, body_pose):
        """-log sum_m w_m N(body_pose; mu_m, Sigma_m); accepts numpy or torch (batched ok)."""
        is_torch = isinstance(body_pose, torch.Tensor)
        x = body_pose if is_torch else torch.as_tensor(np.asarray(body_pose, dtype=np.float64))
        single = x.dim() == 1
        x = x.reshape(-1, self.dim)
        dt = x.dtype
        diff = x[:, None, :] - torch.as_tensor(self.means, dtype=dt)[None]
        maha = torch.einsum("bmi,mij,bmj->bm", diff, torch.as_tensor(self.precisions, dtype=dt),
                            diff)
        log_comp = (torch.log(torch.as_tensor(self.weights, dtype=dt))
                    - 0.5 * (torch.as_tensor(self.log_dets, dtype=dt)
                             + self.dim * math.log(2 * math.pi) + maha))
        out = -torch.logsumexp(log_comp, dim=1)
        out = out[0] if single else out
        return out if is_torch else out.numpy()

    def shape_mahalanobis(self, beta):
        """Squared Mahalanobis distance of ``beta`` from the shape prior mean."""
        dt = beta.dtype
        d = beta - torch.as_tensor(self.shape_mean, dtype=dt)
        return d @ torch.as_tensor(self.shape_precision, dtype=dt) @ d

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist(), "shape_mean": self.shape_mean.tolist(),
                "shape_covariance": self.shape_covariance.tolist(),
                "bend_components": [list(b) for b in self.bend_components]}

    @classmethod
    def from_dict(cls, d: dict) -> "PosePrior":
        return cls(d["weights"], d["means"], d["covariances"], d["shape_mean"],
                   d["shape_covariance"], tuple(tuple(b) for b in d["bend_components"]))


def fit_pose_prior(library: Sequence[BodyPoseParams], n_components: int = 8,
                   body: Optional[BodyModel] = None, reg_covar: float = 1e-3,
                   seed: int = 0) -> PosePrior:
    """Fit the mixture pose prior (and a Gaussian shape prior) to a pose library."""
    from sklearn.mixture import GaussianMixture

    body = body or default_body()
    poses = np.stack([p.theta[3:] for p in library])
    betas = np.stack([p.beta for p in library])
    m = min(n_components, len(library))
    gmm = GaussianMixture(m, covariance_type="full", reg_covar=reg_covar, random_state=seed)
    gmm.fit(poses)
    shape_cov = np.cov(betas.T) + reg_covar * np.eye(betas.shape[1]) if len(library) > 1 \
        else np.eye(betas.shape[1])
    return PosePrior(gmm.weights_ / gmm.weights_.sum(), gmm.means_, gmm.covariances_,
                     betas.mean(0), shape_cov, body.bend_components)


@dataclass(frozen=True)
class FitWeights:
    pose: float = 0.01  # lambda_theta
    shape: float = 0.01  # lambda_beta
    bend: float = 0.01  # lambda_alpha
    robust_sigma: Optional[float] = 100.0  # px; None -> plain squared residuals


def data_term(proj, target):
    """Per-joint squared reprojection residuals, masked by target visibility."""
    vis = (target[:, 2] > 0).to(proj.dtype)
    return ((proj - target[:, :2]) ** 2).sum(1) * vis


def robustify(sq, sigma: Optional[float]):
    # Geman-McClure: sigma^2 r^2 / (sigma^2 + r^2)
    if sigma is None:
        return sq
    s2 = sigma * sigma
    return s2 * sq / (s2 + sq)


def bend_penalty(theta, components):
    """sum_i exp(sign_i * theta_i) over elbow/knee bending components."""
    if not components:
        return theta.new_zeros(())
    idx = torch.tensor([i for i, _ in components])
    sign = torch.tensor([s for _, s in components], dtype=theta.dtype)
    return torch.exp(sign * theta[idx]).sum()


def fitting_loss_torch(theta, beta, cam_t, cam: CameraParams, j2d_target, weights: FitWeights,
                       prior: Optional[PosePrior], body: BodyModel) -> dict:
    joints = forward_kinematics_torch(theta, beta, body)
    proj = project_pinhole(joints, cam, translation=cam_t, joint_names=body.schema.joint_names)
    l_j = robustify(data_term(proj, j2d_target), weights.robust_sigma).sum()
    zero = theta.new_zeros(())
    l_theta = prior.neg_log_density(theta[3:]) if prior is not None and weights.pose else zero
    l_beta = prior.shape_mahalanobis(beta) if prior is not None and weights.shape else zero
    if weights.bend:
        bend = prior.bend_components if prior is not None else body.bend_components
        l_alpha = bend_penalty(theta, bend)
    else:
        l_alpha = zero
    total = l_j + weights.pose * l_theta + weights.shape * l_beta + weights.bend * l_alpha
    return {"L": total, "L_J": l_j, "L_theta": l_theta, "L_beta": l_beta, "L_alpha": l_alpha,
            "projection": proj}


def _check_target(j2d_target: np.ndarray, body: BodyModel) -> np.ndarray:
    t = np.asarray(j2d_target, dtype=np.float64)
    if t.shape != (body.num_joints, 3):
        raise ValueError(f"target must be ({body.num_joints}, 3), got {t.shape}")
    if int((t[:, 2] > 0).sum()) < MIN_LABELED_JOINTS:
        raise ValueError(f"fitting needs at least {MIN_LABELED_JOINTS} labeled joints, "
                         f"got {int((t[:, 2] > 0).sum())}")
    return t


def fitting_loss(theta, beta, cam: CameraParams, j2d_target, weights: FitWeights = FitWeights(),
                 prior: Optional[PosePrior] = None, body: Optional[BodyModel] = None,
                 cam_translation=None) -> tuple:
    """Value and gradients of L_J + l_theta L_theta + l_beta L_beta + l_alpha L_alpha.

    Returns (L, {"theta": dL/dtheta, "beta": dL/dbeta, "translation": dL/dt}, terms).
    """
    body = body or default_body()
    target = torch.from_numpy(_check_target(j2d_target, body))
    th = torch.tensor(np.asarray(theta, dtype=np.float64), requires_grad=True)
    be = torch.tensor(np.asarray(beta, dtype=np.float64), requires_grad=True)
    t0 = cam.translation if cam_translation is None else cam_translation
    tt = torch.tensor(np.asarray(t0, dtype=np.float64), requires_grad=True)
    out = fitting_loss_torch(th, be, tt, cam, target, weights, prior, body)
    out["L"].backward()
    terms = {k: float(v.detach()) for k, v in out.items() if k != "projection"}
    grads = {"theta": th.grad.numpy().copy(), "beta": be.grad.numpy().copy(),
             "translation": tt.grad.numpy().copy()}
    return terms["L"], grads, terms


@dataclass
class FitResult:
    params: BodyPoseParams
    camera: CameraParams
    loss: float
    history: list  # L at every accepted iterate
    reprojection_error: float  # mean px over labeled joints
    iterations: int
    converged: bool


def fit_pose_to_2d(j2d_target, init: BodyPoseParams, cam: CameraParams,
                   weights: FitWeights = FitWeights(), prior: Optional[PosePrior] = None,
                   body: Optional[BodyModel] = None, max_iter: int = 500, tol: float = 1e-10,
                   optimize_shape: bool = True, optimize_translation: bool = True) -> FitResult:
    """Quasi-Newton descent (L-BFGS, gradient-only) on the fitting objective.

    The line search only accepts iterates that decrease L, so ``history`` is
    non-increasing. The camera focal length and rotation stay fixed.
    """
    body = body or default_body()
    target = torch.from_numpy(_check_target(j2d_target, body))
    n_th = init.theta.size
    n_be = init.beta.size if optimize_shape else 0
    x0 = np.concatenate([init.theta, init.beta if optimize_shape else [],
                         cam.translation if optimize_translation else []])
    trace = []

    def unpack(x):
        th = x[:n_th]
        be = x[n_th:n_th + n_be] if optimize_shape else torch.as_tensor(init.beta)
        tt = x[n_th + n_be:] if optimize_translation else torch.as_tensor(cam.translation)
        return th, be, tt

    def fun(x_np):
        x = torch.tensor(x_np, dtype=torch.float64, requires_grad=True)
        th, be, tt = unpack(x)
        out = fitting_loss_torch(th, be, tt, cam, target, weights, prior, body)
        loss = out["L"]
        if not torch.isfinite(loss):
            raise FittingError(f"fitting diverged (L={float(loss)}) after {len(trace)} "
                               "evaluations", trace)
        loss.backward()
        trace.append(float(loss.detach()))
        return float(loss.detach()), x.grad.numpy().copy()

    f0, _ = fun(x0)
    history = [f0]

    def callback(xk):
        history.append(fun(xk)[0])

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-9, "maxcor": 20})
    x = res.x
    th, be, tt = (np.asarray(v, dtype=np.float64) for v in unpack(torch.from_numpy(x)))
    final = float(res.fun)
    if final > history[-1]:
        final = history[-1]
    params = BodyPoseParams(th.copy(), be.copy())
    fitted_cam = CameraParams(cam.principal_point, cam.focal_length, cam.rotation, tt.copy())
    with torch.no_grad():
        proj = project_pinhole(forward_kinematics_torch(torch.from_numpy(params.theta),
                                                        torch.from_numpy(params.beta), body),
                               fitted_cam).numpy()
    t = target.numpy()
    lab = t[:, 2] > 0
    err = float(np.linalg.norm(proj[lab] - t[lab, :2], axis=1).mean())
    return FitResult(params, fitted_cam, final, history, err, int(res.nit), bool(res.success))


def annotation_to_body_target(ann: KeypointAnnotation, mapping: Optional[JointMap] = None,
                              body: Optional[BodyModel] = None) -> np.ndarray:
    """Scatter a COCO-17 annotation into body-joint order (unmapped joints unlabeled)."""
    body = body or default_body()
    mapping = mapping or JointMap.load()
    out = np.zeros((body.num_joints, 3))
    for t, s in enumerate(mapping.indices):
        if s is not None:
            out[s] = ann.keypoints[t]
    return out
