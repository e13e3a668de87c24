"""Bidirectional selective state-space block.

A block normalizes the token series, projects it into a gated inner
stream, runs one selective scan over the sequence and one over the
reversed sequence, gates both with SiLU(fc_z(...)), projects back and
adds the residual.

The selective scan is a single tape primitive: the forward loop keeps
the hidden states and the backward loop walks them in reverse, which
keeps the tape short for sequences of thousands of tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator
from typing import Mapping
from typing import Optional

import numpy as np

from .core import ops
from .core.rng import Rng
from .core.tensor import Tensor
from .core.tensor import apply_op
from .errors import ValidationError


class ScanError(ValidationError):
    """Raised when scan operands disagree in shape."""

    pass


SSM_FIELDS = (
    "A_log",
    "B_proj",
    "C_proj",
    "delta_down",
    "delta_up",
    "delta_bias",
    "D_skip",
)


def delta_rank(channels: int) -> int:
    """Rank of the low-rank step-size projection."""
    return max(1, math.ceil(channels / 16))


@dataclass
class SsmParams:
    """Parameters of one selective scan branch.

    Attributes:
        A_log: log(-A) for the diagonal state matrix [D_inner, N]
        B_proj: Input-dependent input projection [D_inner, N]
        C_proj: Input-dependent output projection [D_inner, N]
        delta_down: Low-rank step projection, first factor [D_inner, R]
        delta_up: Low-rank step projection, second factor [R, D_inner]
        delta_bias: Step bias [D_inner]
        D_skip: Direct feed-through [D_inner]
    """

    A_log: Tensor
    B_proj: Tensor
    C_proj: Tensor
    delta_down: Tensor
    delta_up: Tensor
    delta_bias: Tensor
    D_skip: Tensor

    @property
    def inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in SSM_FIELDS:
            yield name, getattr(self, name)

    @classmethod
    def init(
        cls,
        inner: int,
        state_size: int,
        rank: int,
        rng: Rng,
        dtype=np.float64,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ) -> "SsmParams":
        """Standard initialization: A = -(1..N) per channel, step sizes
        log-uniform in [dt_min, dt_max] through the bias."""
        states = np.arange(1, state_size + 1, dtype=np.float64)
        a_log = np.log(np.tile(states, (inner, 1)))
        dt = np.exp(rng.uniform((inner,), math.log(dt_min), math.log(dt_max)))
        # inverse of softplus so softplus(bias) == dt
        dt_bias = dt + np.log(-np.expm1(-dt))
        return cls(
            A_log=Tensor(a_log, requires_grad=True, dtype=dtype),
            B_proj=Tensor(rng.normal((inner, state_size), inner**-0.5), True, dtype),
            C_proj=Tensor(rng.normal((inner, state_size), inner**-0.5), True, dtype),
            delta_down=Tensor(rng.normal((inner, rank), inner**-0.5), True, dtype),
            delta_up=Tensor(rng.normal((rank, inner), rank**-0.5), True, dtype),
            delta_bias=Tensor(dt_bias, requires_grad=True, dtype=dtype),
            D_skip=Tensor(np.ones(inner), requires_grad=True, dtype=dtype),
        )


@dataclass
class MambaBlockParams:
    """Parameters of one bidirectional block.

    fc_x/fc_z map C -> D_inner, fc_out maps D_inner -> C. conv_f/conv_b are
    depthwise causal kernels [D_inner, K]; with a shared conv both fields
    hold the same tensor.
    """

    norm_gamma: Tensor
    fc_x_w: Tensor
    fc_x_b: Tensor
    fc_z_w: Tensor
    fc_z_b: Tensor
    conv_f: Tensor
    conv_b: Tensor
    ssm_f: SsmParams
    ssm_b: SsmParams
    fc_out_w: Tensor
    fc_out_b: Tensor
    norm_eps: float = 1e-5

    @property
    def channels(self) -> int:
        return self.norm_gamma.shape[0]

    @property
    def inner(self) -> int:
        return self.fc_x_w.shape[1]

    @property
    def shared_conv(self) -> bool:
        return self.conv_f is self.conv_b

    def named(self) -> Iterator[tuple[str, Tensor]]:
        """Yield (name, tensor) for every distinct parameter."""
        yield "norm_gamma", self.norm_gamma
        yield "fc_x_w", self.fc_x_w
        yield "fc_x_b", self.fc_x_b
        yield "fc_z_w", self.fc_z_w
        yield "fc_z_b", self.fc_z_b
        yield "conv_f", self.conv_f
        if not self.shared_conv:
            yield "conv_b", self.conv_b
        for name, tensor in self.ssm_f.named():
            yield f"ssm_f.{name}", tensor
        for name, tensor in self.ssm_b.named():
            yield f"ssm_b.{name}", tensor
        yield "fc_out_w", self.fc_out_w
        yield "fc_out_b", self.fc_out_b

    @classmethod
    def from_named(
        cls, named: Mapping[str, Tensor], norm_eps: float = 1e-5
    ) -> "MambaBlockParams":
        """Rebuild from the names yielded by named(); no conv_b means shared."""

        def ssm(prefix: str) -> SsmParams:
            return SsmParams(
                **{field: named[f"{prefix}.{field}"] for field in SSM_FIELDS}
            )

        try:
            conv_f = named["conv_f"]
            return cls(
                norm_gamma=named["norm_gamma"],
                fc_x_w=named["fc_x_w"],
                fc_x_b=named["fc_x_b"],
                fc_z_w=named["fc_z_w"],
                fc_z_b=named["fc_z_b"],
                conv_f=conv_f,
                conv_b=named.get("conv_b", conv_f),
                ssm_f=ssm("ssm_f"),
                ssm_b=ssm("ssm_b"),
                fc_out_w=named["fc_out_w"],
                fc_out_b=named["fc_out_b"],
                norm_eps=norm_eps,
            )
        except KeyError as e:
            raise ScanError(f"missing block parameter {e}") from None

    @classmethod
    def init(
        cls,
        channels: int,
        rng: Rng,
        state_size: int = 16,
        expand: int = 2,
        conv_width: int = 4,
        shared_conv: bool = False,
        zero_out: bool = True,
        norm_eps: float = 1e-5,
        dtype=np.float64,
    ) -> "MambaBlockParams":
        """Initialize a block for a given channel width.

        Args:
            channels: Token channels C
            rng: Stream for the random weights
            state_size: SSM state size N
            expand: Expansion factor E (D_inner = E * C)
            conv_width: Causal conv width K
            shared_conv: Use one conv kernel for both directions
            zero_out: Zero fc_out so the block starts as the identity
        """
        inner = expand * channels
        rank = delta_rank(channels)

        def weight(shape, fan_in, stream):
            return Tensor(stream.normal(shape, fan_in**-0.5), True, dtype)

        def zeros(shape):
            return Tensor(np.zeros(shape), True, dtype)

        def conv(stream):
            bound = conv_width**-0.5
            values = stream.uniform((inner, conv_width), -bound, bound)
            return Tensor(values, True, dtype)

        conv_f = conv(rng.child(2))
        conv_b = conv_f if shared_conv else conv(rng.child(3))
        fc_out_w = (
            zeros((inner, channels))
            if zero_out
            else weight((inner, channels), inner, rng.child(6))
        )
        return cls(
            norm_gamma=Tensor(np.ones(channels), True, dtype),
            fc_x_w=weight((channels, inner), channels, rng.child(0)),
            fc_x_b=zeros((inner,)),
            fc_z_w=weight((channels, inner), channels, rng.child(1)),
            fc_z_b=zeros((inner,)),
            conv_f=conv_f,
            conv_b=conv_b,
            ssm_f=SsmParams.init(inner, state_size, rank, rng.child(4), dtype),
            ssm_b=SsmParams.init(inner, state_size, rank, rng.child(5), dtype),
            fc_out_w=fc_out_w,
            fc_out_b=zeros((channels,)),
            norm_eps=norm_eps,
        )


def run_scan(
    u: np.ndarray,
    delta: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    D: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain-array selective scan.

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,  h_0 = 0
    y_t = <C_t, h_t> + D * u_t

    Args:
        u: Inputs [len, D_inner]
        delta: Step sizes [len, D_inner]
        A: State matrix diagonal [D_inner, N]
        B: Input projections [len, N]
        C: Output projections [len, N]
        D: Feed-through [D_inner]

    Returns:
        Tuple of (y [len, D_inner], states [len, D_inner, N], decay [len, D_inner, N])
    """
    decay = np.exp(delta[:, :, None] * A[None, :, :])
    drive = delta[:, :, None] * B[:, None, :] * u[:, :, None]
    states = np.empty_like(drive)
    h = np.zeros_like(drive[0])
    for t in range(u.shape[0]):
        h = decay[t] * h + drive[t]
        states[t] = h
    y = np.einsum("ldn,ln->ld", states, C) + u * D
    return y, states, decay


def scan(
    u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor
) -> Tensor:
    """Differentiable selective scan over explicit operands (see run_scan).

    Raises:
        ScanError: If operand shapes disagree
    """
    length, inner = u.shape
    state = A.shape[1] if A.ndim == 2 else -1
    expected = {
        "delta": (delta.shape, (length, inner)),
        "A": (A.shape, (inner, state)),
        "B": (B.shape, (length, state)),
        "C": (C.shape, (length, state)),
        "D": (D.shape, (inner,)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ScanError(f"scan: {name} has shape {got}, expected {want}")

    y, states, decay = run_scan(u.data, delta.data, A.data, B.data, C.data, D.data)

    def backward_fn(g):
        grad_states = np.empty_like(states)
        carry = np.zeros_like(states[0])
        for t in range(length - 1, -1, -1):
            carry = carry + g[t][:, None] * C.data[t][None, :]
            grad_states[t] = carry
            carry = carry * decay[t]
        previous = np.concatenate([np.zeros_like(states[:1]), states[:-1]], axis=0)
        grad_decay = grad_states * previous * decay
        grad_C = np.einsum("ldn,ld->ln", states, g)
        grad_D = np.sum(g * u.data, axis=0)
        grad_delta = np.einsum("ldn,dn->ld", grad_decay, A.data)
        grad_delta += np.einsum("ldn,ln->ld", grad_states, B.data) * u.data
        grad_A = np.einsum("ldn,ld->dn", grad_decay, delta.data)
        grad_B = np.einsum("ldn,ld->ln", grad_states, delta.data * u.data)
        grad_u = g * D.data + np.einsum("ldn,ln->ld", grad_states, B.data) * delta.data
        return grad_u, grad_delta, grad_A, grad_B, grad_C, grad_D

    return apply_op("selective_scan", y, (u, delta, A, B, C, D), backward_fn)


def selective_scan(u: Tensor, p: SsmParams) -> Tensor:
    """Selective scan with input-dependent step, B and C.

    delta_t = softplus(u_t @ delta_down @ delta_up + delta_bias)
    B_t = u_t @ B_proj, C_t = u_t @ C_proj, A = -exp(A_log)

    Args:
        u: Inner stream [len, D_inner]
        p: Branch parameters

    Returns:
        Output [len, D_inner]
    """
    if u.ndim != 2 or u.shape[1] != p.inner:
        raise ScanError(f"selective_scan: input {u.shape} vs inner width {p.inner}")
    low_rank = ops.matmul(ops.matmul(u, p.delta_down), p.delta_up)
    delta = ops.softplus(ops.add(low_rank, p.delta_bias))
    B = ops.matmul(u, p.B_proj)
    C = ops.matmul(u, p.C_proj)
    A = ops.neg(ops.exp(p.A_log))
    return scan(u, delta, A, B, C, p.D_skip)


def mamba_block(tokens: Tensor, params: MambaBlockParams) -> Tensor:
    """One bidirectional block with residual connection.

    x = fc_x(norm(T)), z = SiLU(fc_z(norm(T)))
    y = fc_out(SSM_f(conv_f(x)) * z + reverse(SSM_b(conv_b(reverse(x)))) * z)
    return y + T

    Args:
        tokens: Token series [M, C]
        params: Block parameters for C channels

    Raises:
        ScanError: If the channel count does not match the parameters
    """
    if tokens.ndim != 2 or tokens.shape[1] != params.channels:
        raise ScanError(
            f"mamba_block: tokens {tokens.shape} vs block width {params.channels}"
        )
    normed = ops.rms_norm(tokens, params.norm_gamma, params.norm_eps)
    x = ops.add(ops.matmul(normed, params.fc_x_w), params.fc_x_b)
    z = ops.silu(ops.add(ops.matmul(normed, params.fc_z_w), params.fc_z_b))

    forward_branch = selective_scan(
        ops.causal_depthwise_conv1d(x, params.conv_f), params.ssm_f
    )
    reversed_x = ops.flip(x, axis=0)
    backward_branch = ops.flip(
        selective_scan(
            ops.causal_depthwise_conv1d(reversed_x, params.conv_b), params.ssm_b
        ),
        axis=0,
    )
    gated = ops.add(ops.mul(forward_branch, z), ops.mul(backward_branch, z))
    out = ops.add(ops.matmul(gated, params.fc_out_w), params.fc_out_b)
    return ops.add(out, tokens)


def swapped_directions(params: MambaBlockParams) -> MambaBlockParams:
    """Copy of params with the forward and backward branches exchanged."""
    from dataclasses import replace

    return replace(
        params,
        conv_f=params.conv_b,
        conv_b=params.conv_f,
        ssm_f=params.ssm_b,
        ssm_b=params.ssm_f,
    )


def state_bound(
    u: np.ndarray, delta: np.ndarray, A: np.ndarray, B: np.ndarray
) -> Optional[float]:
    """Upper bound on |h_t| from the geometric series of the recurrence.

    Returns None when some decay factor reaches 1 (no finite bound).
    """
    decay = np.exp(delta[:, :, None] * A[None, :, :])
    worst_decay = float(decay.max())
    if worst_decay >= 1.0:
        return None
    worst_drive = float(np.abs(delta[:, :, None] * B[:, None, :] * u[:, :, None]).max())
    return worst_drive / (1.0 - worst_decay)
