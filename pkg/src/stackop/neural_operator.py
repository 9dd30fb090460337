"""Attentional neural operator H^2_T -> H^2_T.

    x = E(u)                          encoder: inner products with d_enc basis directions
    w = f(x),  V = g(x)               processor (d_enc -> N) and values net (d_enc -> N Q)
    U(u) = sum_n softmax(w)_n sum_q V_{n,q} v^(n,q)

The value elements v^(n,q) are basis directions, so the output is carried as a
coefficient vector gamma in R^{N Q} with gamma_{nQ+q} = softmax(w)_n V_{n,q}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stackop import autodiff as ad
from stackop.basis import BasisElement, basis_element
from stackop.errors import DimensionError
from stackop.nn import MLP, Activation, mlp_from_state, mlp_state, parameter_count, read_named_tensors, write_named_tensors
from stackop.process import AdaptedProcess, BrownianEnsemble, HorizonConfig, ProjectionBasis, encode


def softmax(w) -> np.ndarray:
    """Max-subtracted softmax of a nonempty vector, renormalized to sum to one."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(w - np.max(w))
    return e / np.sort(e).sum()


@dataclass
class BudgetReport:
    processor: int
    values_net: int
    total: int
    J: int
    W: int
    N: int
    Q: int
    budget: int
    declared_W: int

    @property
    def within(self) -> bool:
        return self.total <= self.budget

    def __str__(self):
        verdict = "within" if self.within else "EXCEEDS"
        return (
            f"parameters {self.total} (processor {self.processor}, values {self.values_net}) {verdict} "
            f"J W^2 + N Q = {self.J}*{self.W}^2 + {self.N}*{self.Q} = {self.budget} "
            f"(declared W = {self.declared_W}, realized max width = {self.W})"
        )


class AttentionalNO:
    def __init__(
        self,
        encoder_basis: ProjectionBasis,
        processor: MLP,
        values_net: MLP,
        value_basis: ProjectionBasis,
        N: int,
        Q: int,
        declared_W: int | None = None,
    ):
        if processor.d_out != N:
            raise DimensionError(f"processor outputs {processor.d_out} weights, N = {N}")
        if values_net.d_out != N * Q:
            raise DimensionError(f"values net outputs {values_net.d_out}, N Q = {N * Q}")
        if processor.d_in != encoder_basis.dim or values_net.d_in != encoder_basis.dim:
            raise DimensionError("both nets must read the full encoding")
        if value_basis.dim < N * Q:
            raise DimensionError(f"value basis has {value_basis.dim} directions, need N Q = {N * Q}")
        self.encoder_basis = encoder_basis
        self.processor = processor
        self.values_net = values_net
        self.value_basis = value_basis
        self.N, self.Q = N, Q
        self.declared_W = declared_W or max(processor.max_width, values_net.max_width)

    @classmethod
    def build(
        cls,
        cfg: HorizonConfig,
        d_enc: int,
        N: int,
        Q: int,
        J: int,
        W: int,
        family=Activation.STANDARD,
        seed: int = 0,
        k_in: int = 1,
        k_out: int = 1,
    ) -> "AttentionalNO":
        """Value elements are the first N Q basis directions, row-major in (n, q)."""
        if J < 1:
            raise DimensionError("depth J must be >= 1")
        rng = np.random.default_rng(seed)
        enc = ProjectionBasis.first(d_enc, cfg, k=k_in)
        n_val = -(-N * Q // k_out)
        val = ProjectionBasis.first(n_val, cfg, k=k_out)
        hidden = [W] * (J - 1)
        proc = MLP.build([enc.dim, *hidden, N], family, rng)
        vals = MLP.build([enc.dim, *hidden, N * Q], family, rng)
        return cls(enc, proc, vals, val, N, Q, declared_W=W)

    # ---- structure -----------------------------------------------------------------

    @property
    def d_enc(self) -> int:
        return self.encoder_basis.dim

    @property
    def J(self) -> int:
        return max(self.processor.depth, self.values_net.depth)

    @property
    def family(self) -> Activation:
        return self.processor.family

    def parameters(self) -> list[ad.Tensor]:
        return self.processor.parameters() + self.values_net.parameters()

    def value_elements(self) -> list[list[tuple[BasisElement, int]]]:
        """N x Q grid of (basis element, component) pairs."""
        k = self.value_basis.k
        return [[(self.value_basis.elements[(n * self.Q + q) // k], (n * self.Q + q) % k) for q in range(self.Q)] for n in range(self.N)]

    # ---- evaluation ----------------------------------------------------------------

    def coefficients_tensor(self, x) -> ad.Tensor:
        """Output coefficients gamma (B, N Q) for encodings x (B, d_enc); on the tape."""
        x = ad.as_tensor(x)
        w = self.processor(x)
        V = ad.reshape(self.values_net(x), x.shape[:-1] + (self.N, self.Q))
        a = ad.softmax(w, axis=-1)
        gamma = ad.reshape(a, a.shape + (1,)) * V
        return ad.reshape(gamma, x.shape[:-1] + (self.N * self.Q,))

    def output_coefficients(self, x) -> np.ndarray:
        with ad.no_grad():
            return self.coefficients_tensor(x).data

    def _full(self, gamma: np.ndarray) -> np.ndarray:
        out = np.zeros(gamma.shape[:-1] + (self.value_basis.dim,))
        out[..., : self.N * self.Q] = gamma
        return out

    def synthesize_tensor(self, gamma: ad.Tensor, ensemble: BrownianEnsemble) -> ad.Tensor:
        """Process values (P, M, k) of sum_r gamma_r v_r for one coefficient vector (N Q,)."""
        tp, ch = self.value_basis.factors(ensemble)
        k = self.value_basis.k
        pad = self.value_basis.dim - self.N * self.Q
        g = ad.concatenate([gamma, ad.Tensor(np.zeros(pad))], axis=0) if pad else gamma
        g = ad.reshape(g, (len(self.value_basis), k))
        return ad.einsum("np,nk,nm->pmk", ch, g, tp)

    def encode(self, u: AdaptedProcess) -> np.ndarray:
        return encode(u, self.encoder_basis)

    def apply(self, u: AdaptedProcess, ensemble: BrownianEnsemble | None = None) -> AdaptedProcess:
        ensemble = ensemble or u.ensemble
        if u.ensemble is not ensemble and u.ensemble.key != ensemble.key:
            raise DimensionError("control lives on a different ensemble")
        gamma = self.output_coefficients(self.encode(u))
        return self.value_basis.synthesize(self._full(gamma), ensemble)

    def __call__(self, u: AdaptedProcess) -> AdaptedProcess:
        return self.apply(u)

    # ---- bookkeeping ------------------------------------------------------------------

    def total_parameters(self) -> int:
        return parameter_count(self.processor) + parameter_count(self.values_net)

    def budget_report(self) -> BudgetReport:
        p, v = parameter_count(self.processor), parameter_count(self.values_net)
        W = max(self.declared_W, self.processor.max_width, self.values_net.max_width)
        return BudgetReport(p, v, p + v, self.J, W, self.N, self.Q, self.J * W * W + self.N * self.Q, self.declared_W)

    # ---- checkpoints -------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        st = {}
        st.update(mlp_state(self.processor, "processor."))
        st.update(mlp_state(self.values_net, "values_net."))
        st["encoder.ranks"] = np.asarray(self.encoder_basis.ranks, dtype=np.float64)
        st["encoder.k"] = np.asarray(self.encoder_basis.k, dtype=np.float64)
        st["value.ranks"] = np.asarray(self.value_basis.ranks, dtype=np.float64)
        st["value.k"] = np.asarray(self.value_basis.k, dtype=np.float64)
        st["shape.NQW"] = np.asarray([self.N, self.Q, self.declared_W], dtype=np.float64)
        return st

    def save(self, path, extra: dict | None = None, header: str = "") -> None:
        st = self.state()
        for name, arr in (extra or {}).items():
            st[name] = np.asarray(arr, dtype=np.float64)
        write_named_tensors(path, st, header=f"family={self.family.value}\n{header}".rstrip("\n"))

    @classmethod
    def load(cls, path, cfg: HorizonConfig) -> tuple["AttentionalNO", dict]:
        family = Activation.STANDARD
        with open(path) as fh:
            for line in fh:
                if line.startswith("# family="):
                    family = Activation(line.strip().split("=", 1)[1])
                    break
        st = read_named_tensors(path)
        enc = ProjectionBasis([basis_element(int(r), cfg) for r in st["encoder.ranks"].reshape(-1)], k=int(st["encoder.k"]))
        val = ProjectionBasis([basis_element(int(r), cfg) for r in st["value.ranks"].reshape(-1)], k=int(st["value.k"]))
        N, Q, W = (int(v) for v in st["shape.NQW"])
        no = cls(enc, mlp_from_state(st, "processor.", family), mlp_from_state(st, "values_net.", family), val, N, Q, declared_W=W)
        return no, st
