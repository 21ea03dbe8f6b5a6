"""Recoloring attack: random search over fused color targets, then a
momentum sign search on the color transfer matrix.

One attack on an image runs `resets` independent rounds. Each round
samples `eta` fused target distributions (one library draw per mask
class, weighted by class area), keeps the one whose recolored image
maximizes the oracle's margin loss, then refines the closed-form
transfer matrix with `iterations` signed gradient steps inside an
entrywise epsilon ball. The best round by final loss wins.

All randomness flows through per-round generators derived from
(config.seed, round index), so runs with fewer rounds are exact
prefixes of runs with more.

Candidate selection inside a round is vectorized: the recolored stack
is scored through a float32 forward pass, and only the selected
candidate is rebuilt through the scalar double-precision path that
defines the recorded artifacts. The sign searches of all rounds advance
in lockstep, one batched forward/backward per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .colorspace import (
    lab_jacobian_vjp,
    lab_to_rgb,
    lab_to_rgb_diagonals,
    lab_to_rgb_f32,
    rgb_to_lab,
)
from .distlib import (
    LIB_SLOTS,
    ColorDistribution,
    fuse_distributions,
    histogram_of,
    moments_of_distribution,
    raw_moment_arrays,
    sample_distribution,
)
from .image_io import quantize_u8
from .oracle import (
    oracle_logits_batch,
    oracle_losses_and_rgb_gradients,
    oracle_score_logits_batch,
)
from .transport import (
    COV_RIDGE,
    apply_transfer,
    image_moments,
    mk_transfer,
    mk_transfer_many,
)

VARIANTS = ("ncf", "ncf-ns", "ncf-ir", "ncf-ir-ns", "random-color")


def default_alpha(epsilon: float, iterations: int) -> float:
    """Largest step <= epsilon/iterations whose accumulated float sum
    stays within epsilon (keeps the pre-clamp ball bound exact)."""
    if iterations <= 0 or epsilon <= 0.0:
        return 0.0
    alpha = epsilon / iterations
    while True:
        total = 0.0
        for _ in range(iterations):
            total += alpha
        if total <= epsilon:
            return alpha
        alpha = np.nextafter(alpha, 0.0)


@dataclass(frozen=True)
class AttackConfig:
    eta: int = 50  # random-search width
    iterations: int = 15  # sign-search steps
    resets: int = 10  # independent rounds
    epsilon: float = 0.2  # entrywise ball radius around the transfer
    alpha: float | None = None  # step size; None -> default_alpha
    momentum: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.iterations < 0 or self.resets < 1:
            raise ValueError("iterations must be >= 0 and resets >= 1")
        if self.epsilon < 0.0 or self.momentum < 0.0:
            raise ValueError("epsilon and momentum must be >= 0")
        if self.alpha is not None and not 0.0 <= self.alpha <= self.epsilon:
            raise ValueError("alpha must lie in [0, epsilon]")

    @property
    def effective_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return default_alpha(self.epsilon, self.iterations)


def variant_config(config: AttackConfig, variant: str) -> AttackConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "ncf-ns":
        return replace(config, iterations=0)
    if variant == "ncf-ir":
        return replace(config, resets=1)
    if variant == "ncf-ir-ns":
        return replace(config, iterations=0, resets=1)
    if variant == "random-color":
        return replace(config, eta=1, iterations=0, resets=1)
    return config


@dataclass
class ResetRecord:
    slots: dict[int, int | None]  # mask class -> 1-based library slot (None = own-image fallback)
    target: ColorDistribution
    transfer: np.ndarray
    transfer_final: np.ndarray
    mu_target: np.ndarray
    loss_search: float | None
    loss_final: float | None
    max_preclamp: float


@dataclass
class AttackResult:
    variant: str
    label: int
    config: AttackConfig
    resets: list[ResetRecord]
    chosen_reset: int  # 0-based index into resets
    adversarial: np.ndarray  # 8-bit-quantized float RGB
    success: dict[str, bool] = field(default_factory=dict)
    gamut_clip_fraction: float = 0.0


def class_weights(mask) -> dict[int, float]:
    """Area fraction per class id, keys sorted."""
    mask = np.asarray(mask)
    ids, counts = np.unique(mask, return_counts=True)
    total = mask.size
    return {int(c): float(n) / total for c, n in zip(ids, counts)}


def build_target(lib, weights, rng, fallbacks=None):
    """Fused target distribution: one library draw per mask class.

    Classes missing from the library contribute their own empirical
    distribution from `fallbacks` (and consume no randomness). Returns
    (ColorDistribution, {class id -> slot or None}).
    """
    parts, slots = [], {}
    for cid in sorted(weights):
        if lib is not None and cid in lib.classes:
            slot, dist = sample_distribution(lib, cid, rng)
            slots[cid] = slot
        else:
            dist = (fallbacks or {})[cid]
            slots[cid] = None
        parts.append((weights[cid], dist))
    return fuse_distributions(parts), slots


def _margin_losses(logits, label):
    """Vectorized margin loss (B,): max rival logit minus true logit."""
    z = np.asarray(logits, dtype=np.float64)
    masked = z.copy()
    masked[:, int(label)] = -np.inf
    return masked.max(axis=1) - z[:, int(label)]


def _apply_transfer_stack(lab2d, transfers, mu_src, mu_targets):
    """apply_transfer for a stack of transfers over one flat Lab image.

    Same offset form as apply_transfer: x @ T^T + (mu_dst - T mu_src).
    Returns (K, N, 3).
    """
    offsets = mu_targets - np.matmul(transfers, mu_src)
    out = np.matmul(lab2d, np.swapaxes(transfers, 1, 2))
    out += offsets[:, None, :]
    return out


def _score_stack(oracle, rgbs, label) -> np.ndarray:
    """Margin losses of an RGB stack through the fast scoring forward."""
    return _margin_losses(oracle_score_logits_batch(oracle, rgbs), label)


@dataclass
class SearchPick:
    target: ColorDistribution
    slots: dict[int, int | None]
    transfer: np.ndarray
    mu_target: np.ndarray
    loss: float | None


def random_search(lab_img, label, oracle, lib, weights, rng, src_moments=None,
                  eta=50, fallbacks=None, evaluate=True) -> SearchPick:
    """Best of `eta` sampled targets by oracle margin loss.

    All slot draws come from one bulk rng call, which matches the
    per-candidate scalar draws bit for bit, so runs with smaller eta on
    a shared stream are exact prefixes of larger ones. Candidates are
    ranked by the float32 scoring forward on fused moments read from
    per-slot tables; ties take the smallest candidate index. The chosen
    candidate is then rebuilt through fuse_distributions /
    moments_of_distribution / mk_transfer, so the recorded target,
    transfer and mean come from the reference double-precision path, and
    its recorded loss is the float32 score of exactly those artifacts.
    With evaluate=False the single first draw is returned unscored (the
    blind recolor baseline).
    """
    if src_moments is None:
        src_moments = image_moments(lab_img)
    lab = np.asarray(lab_img, dtype=np.float64)
    eta = int(eta)
    cids = sorted(weights)
    in_lib = {c: lib is not None and c in lib.classes for c in cids}
    slot_mat = rng.integers(LIB_SLOTS, size=(eta, sum(in_lib.values())))

    if evaluate:
        means = np.zeros((eta, 3))
        seconds = np.zeros((eta, 3, 3))
        col = 0
        for cid in cids:
            frac = weights[cid]
            if in_lib[cid]:
                m, s = raw_moment_arrays(lib.classes[cid])
                idx = slot_mat[:, col]
                col += 1
                means += frac * m[idx]
                seconds += frac * s[idx]
            else:
                m, s = raw_moment_arrays([(fallbacks or {})[cid]])
                means += frac * m[0]
                seconds += frac * s[0]
        covs = seconds - means[:, :, None] * means[:, None, :]
        covs += COV_RIDGE * np.eye(3)
        transfers = mk_transfer_many(src_moments, covs)
        recolored = _apply_transfer_stack(
            lab.reshape(-1, 3), transfers, src_moments.mean, means
        ).reshape((eta,) + lab.shape)
        losses = _score_stack(oracle, lab_to_rgb_f32(recolored), label)
        best = int(np.argmax(losses))
    else:
        best = 0

    parts, slots = [], {}
    col = 0
    for cid in cids:
        if in_lib[cid]:
            idx = int(slot_mat[best, col])
            col += 1
            slots[cid] = idx + 1
            parts.append((weights[cid], lib.classes[cid][idx]))
        else:
            slots[cid] = None
            parts.append((weights[cid], (fallbacks or {})[cid]))
    target = fuse_distributions(parts)
    tmom = moments_of_distribution(target)
    transfer = mk_transfer(src_moments, tmom)

    loss = None
    if evaluate:
        rebuilt = apply_transfer(lab, transfer, src_moments.mean, tmom.mean)
        loss = float(_score_stack(oracle, lab_to_rgb_f32(rebuilt)[None], label)[0])
    return SearchPick(target, slots, transfer, tmom.mean, loss)


def _stack_losses_and_grads(lab_img, label, oracle, transfers, mu_targets, mu_src):
    """Margin losses and transfer gradients for a stack of transfers.

    Chain per entry: recolored Lab -> RGB (clamped channels contribute
    zero through the Jacobian) -> oracle margin loss. The gradient with
    respect to the transfer is sum_p u_p (x_p - mu_src)^T with u_p the
    Lab-space pixel gradient. Returns (losses (K,), grads (K, 3, 3)).
    """
    lab = np.asarray(lab_img, dtype=np.float64)
    lab2d = lab.reshape(-1, 3)
    k = transfers.shape[0]
    recolored = _apply_transfer_stack(
        lab2d, transfers, mu_src, mu_targets
    ).reshape((k,) + lab.shape)
    rgb, _, d_s, d_xyz = lab_to_rgb_diagonals(recolored)
    losses, grad_rgb = oracle_losses_and_rgb_gradients(oracle, rgb, label)
    u = lab_jacobian_vjp(d_s, d_xyz, grad_rgb).reshape(k, -1, 3)
    grads = np.matmul(np.swapaxes(u, 1, 2), lab2d - mu_src)
    return losses, grads


def pipeline_loss_and_transfer_grad(lab_img, label, oracle, transfer, mu_src, mu_target):
    """Margin loss of the recolored image and d(loss)/d(transfer).

    Single-transfer view of _stack_losses_and_grads (the production
    path), for probing and refinement entry points.
    """
    losses, grads = _stack_losses_and_grads(
        lab_img, label, oracle,
        np.asarray(transfer, np.float64).reshape(1, 3, 3),
        np.asarray(mu_target, np.float64).reshape(1, 3),
        np.asarray(mu_src, np.float64),
    )
    return float(losses[0]), grads[0]


def _pipeline_loss(lab_img, label, oracle, transfer, mu_src, mu_target):
    recolored = apply_transfer(lab_img, transfer, mu_src, mu_target)
    rgb, _ = lab_to_rgb(recolored)
    losses = _margin_losses(oracle_logits_batch(oracle, rgb[None]), label)
    return float(losses[0])


def _ball_fixup(final, base, epsilon):
    """Nudge entries toward base until fl(final - base) fits the ball."""
    final = final.copy()
    for _ in range(64):
        over = np.abs(final - base) > epsilon
        if not over.any():
            return final
        final = np.where(over, np.nextafter(final, base), final)
    raise AssertionError("ball fixup did not converge")


@dataclass
class SignSearchResult:
    transfer: np.ndarray
    loss: float | None
    max_preclamp: float


def neighborhood_search_stack(lab_img, label, oracle, transfers, mu_targets,
                              mu_src, config: AttackConfig,
                              search_losses=None) -> list[SignSearchResult]:
    """neighborhood_search over a stack of start points in lockstep.

    The rounds of an attack are independent, so their sign searches
    advance together: one batched forward/backward per iteration covers
    all of them. Each entry follows the exact single-start semantics.
    """
    transfers = np.asarray(transfers, dtype=np.float64)
    mu_targets = np.asarray(mu_targets, dtype=np.float64)
    k = transfers.shape[0]
    if search_losses is None:
        search_losses = [None] * k
    alpha = config.effective_alpha

    if config.iterations == 0:
        out = []
        for i in range(k):
            loss = search_losses[i]
            if loss is None:
                loss = _pipeline_loss(
                    lab_img, label, oracle, transfers[i], mu_src, mu_targets[i]
                )
            out.append(SignSearchResult(transfers[i].copy(), float(loss), 0.0))
        return out

    delta = np.zeros_like(transfers)
    moment = np.zeros_like(transfers)
    max_pre = np.zeros(k)
    for _ in range(config.iterations):
        _, grads = _stack_losses_and_grads(
            lab_img, label, oracle, transfers + delta, mu_targets, mu_src
        )
        l1 = np.abs(grads).sum(axis=(1, 2), keepdims=True)
        # zero gradients contribute nothing and momentum coasts
        moment = config.momentum * moment + np.divide(
            grads, l1, out=np.zeros_like(grads), where=l1 > 0.0
        )
        proposal = delta + alpha * np.sign(moment)
        max_pre = np.maximum(max_pre, np.abs(proposal).reshape(k, -1).max(axis=1))
        delta = np.clip(proposal, -config.epsilon, config.epsilon)

    final = _ball_fixup(transfers + delta, transfers, config.epsilon)
    lab = np.asarray(lab_img, dtype=np.float64)
    recolored = _apply_transfer_stack(
        lab.reshape(-1, 3), final, mu_src, mu_targets
    ).reshape((k,) + lab.shape)
    rgb, _ = lab_to_rgb(recolored)
    finals = _margin_losses(oracle_logits_batch(oracle, rgb), label)
    return [
        SignSearchResult(final[i], float(finals[i]), float(max_pre[i]))
        for i in range(k)
    ]


def neighborhood_search(lab_img, label, oracle, transfer, mu_src, mu_target,
                        config: AttackConfig, search_loss=None) -> SignSearchResult:
    """Momentum sign ascent on the transfer inside the epsilon ball.

    Per step: normalize the transfer gradient by its entrywise L1 mass,
    accumulate with decay `momentum`, move alpha * sign, clamp the
    perturbation entrywise to [-epsilon, epsilon]. Returns the final
    matrix, its loss, and the largest pre-clamp perturbation seen.
    """
    return neighborhood_search_stack(
        lab_img, label, oracle,
        np.asarray(transfer, np.float64).reshape(1, 3, 3),
        np.asarray(mu_target, np.float64).reshape(1, 3),
        mu_src, config, [search_loss],
    )[0]


def ncf_attack(rgb_img, label, mask, oracle, lib, config: AttackConfig,
               variant: str = "ncf") -> AttackResult:
    """Full attack on one RGB image; see the module docstring.

    lib=None disables the library entirely: no sampling, no search, the
    transfer is the identity and the output is the Lab round trip of
    the input.
    """
    cfg = variant_config(config, variant)
    lab = rgb_to_lab(rgb_img)
    src_moments = image_moments(lab)
    label = int(label)

    if lib is None:
        records = [_identity_record(lab, label, oracle, src_moments)]
        chosen = 0
    else:
        weights = class_weights(mask)
        fallbacks = {
            cid: histogram_of(lab[np.asarray(mask) == cid])
            for cid in weights
            if cid not in lib.classes
        }
        blind = variant == "random-color"
        picks = []
        for round_idx in range(1, cfg.resets + 1):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_idx]))
            picks.append(
                random_search(
                    lab, label, oracle, lib, weights, rng,
                    src_moments=src_moments, eta=cfg.eta, fallbacks=fallbacks,
                    evaluate=not blind,
                )
            )
        if blind:
            refined = [SignSearchResult(p.transfer.copy(), None, 0.0) for p in picks]
        else:
            refined = neighborhood_search_stack(
                lab, label, oracle,
                np.stack([p.transfer for p in picks]),
                np.stack([p.mu_target for p in picks]),
                src_moments.mean, cfg, [p.loss for p in picks],
            )
        records = [
            ResetRecord(
                slots=p.slots,
                target=p.target,
                transfer=p.transfer,
                transfer_final=r.transfer,
                mu_target=p.mu_target,
                loss_search=p.loss,
                loss_final=r.loss,
                max_preclamp=r.max_preclamp,
            )
            for p, r in zip(picks, refined)
        ]
        chosen = 0 if blind else int(np.argmax([r.loss_final for r in records]))

    win = records[chosen]
    final_lab = apply_transfer(lab, win.transfer_final, src_moments.mean, win.mu_target)
    final_rgb, clip_fraction = lab_to_rgb(final_lab)
    adversarial = quantize_u8(final_rgb).astype(np.float64) / 255.0

    pred = int(np.argmax(oracle_logits_batch(oracle, adversarial[None])[0]))
    return AttackResult(
        variant=variant,
        label=label,
        config=cfg,
        resets=records,
        chosen_reset=chosen,
        adversarial=adversarial,
        success={oracle.name: pred != label},
        gamut_clip_fraction=clip_fraction,
    )


def _identity_record(lab, label, oracle, src_moments):
    eye = np.eye(3)
    loss = _pipeline_loss(lab, label, oracle, eye, src_moments.mean, src_moments.mean)
    return ResetRecord(
        slots={},
        target=None,
        transfer=eye,
        transfer_final=eye.copy(),
        mu_target=src_moments.mean,
        loss_search=loss,
        loss_final=loss,
        max_preclamp=0.0,
    )


def attack_variant(rgb_img, label, mask, oracle, lib, config: AttackConfig,
                   kind: str) -> AttackResult:
    """Named ablation entry point; `kind` is one of VARIANTS."""
    return ncf_attack(rgb_img, label, mask, oracle, lib, config, variant=kind)


def result_to_dict(result: AttackResult, adversarial_path=None) -> dict:
    """JSON-ready view of an AttackResult (deterministic field order)."""
    cfg = result.config
    doc = {
        "variant": result.variant,
        "label": result.label,
        "config": {
            "eta": cfg.eta,
            "iterations": cfg.iterations,
            "resets": cfg.resets,
            "epsilon": cfg.epsilon,
            "alpha": cfg.effective_alpha,
            "momentum": cfg.momentum,
            "seed": cfg.seed,
        },
        "chosen_reset": result.chosen_reset,
        "success": dict(sorted(result.success.items())),
        "gamut_clip_fraction": result.gamut_clip_fraction,
        "resets": [
            {
                "slots": {str(k): v for k, v in sorted(r.slots.items())},
                "transfer": np.asarray(r.transfer).tolist(),
                "transfer_final": np.asarray(r.transfer_final).tolist(),
                "mu_target": np.asarray(r.mu_target).tolist(),
                "loss_search": r.loss_search,
                "loss_final": r.loss_final,
                "max_preclamp": r.max_preclamp,
            }
            for r in result.resets
        ],
    }
    if adversarial_path is not None:
        doc["adversarial_path"] = str(adversarial_path)
    return doc
