"""Differentiable (torch) joint forward model mirroring ``body_model``."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .body_model import BodyModelAsset, NUM_JOINTS


def batch_rodrigues(aa: torch.Tensor) -> torch.Tensor:
    """(..., 3) axis-angle -> (..., 3, 3) rotation matrices."""
    sq = (aa * aa).sum(-1, keepdim=True)
    small = sq < 1e-16
    angle = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    a = torch.where(small, torch.ones_like(angle), torch.sin(angle) / angle)
    b = torch.where(small, torch.full_like(angle, 0.5), (1 - torch.cos(angle)) / angle**2)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(*aa.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand_as(K)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


class TorchJointModel(nn.Module):
    """Posed 3D joints as a function of (theta, beta); no mesh skinning."""

    def __init__(self, asset: BodyModelAsset, dtype=torch.float32):
        super().__init__()
        J_template = asset.joint_regressor @ asset.template_vertices
        J_dirs = np.einsum("jv,vcb->jcb", asset.joint_regressor, asset.shape_dirs)
        self.register_buffer("J_template", torch.as_tensor(J_template, dtype=dtype))
        self.register_buffer("J_dirs", torch.as_tensor(J_dirs, dtype=dtype))
        self.parents = [int(p) for p in asset.parents]

    def rest_joints(self, beta: torch.Tensor) -> torch.Tensor:
        return self.J_template + torch.einsum("jcb,nb->njc", self.J_dirs, beta)

    def forward(self, theta: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        J = self.rest_joints(beta)
        R = batch_rodrigues(theta.reshape(-1, NUM_JOINTS, 3))
        rots = [R[:, 0]]
        pos = [J[:, 0]]
        for k in range(1, NUM_JOINTS):
            p = self.parents[k]
            rots.append(rots[p] @ R[:, k])
            pos.append(pos[p] + (rots[p] @ (J[:, k] - J[:, p]).unsqueeze(-1)).squeeze(-1))
        return torch.stack(pos, dim=1)

    def rotation_features(self, theta: torch.Tensor) -> torch.Tensor:
        return batch_rodrigues(theta.reshape(-1, NUM_JOINTS, 3)).reshape(theta.shape[0], -1)
