# bsa/attack_func.py
"""
Block-wise similarity attack

The loss is the sum, over every image-encoder block and every
multimodal-encoder block, of the cosine similarity between clean and
perturbed per-position features. Sign-gradient descent on it (PGD, or the
momentum variant) pushes the perturbed features away from the clean ones
inside the l-inf ball.
"""

import logging

import torch

from modelzoo.exceptions import AttackError, InputError
from modelzoo.networks import forward_with_features


logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12

BOTH_TERMS = 'both'
IMAGE_TERMS = 'image'
FUSION_TERMS = 'fusion'
LOSS_TERMS = (BOTH_TERMS, IMAGE_TERMS, FUSION_TERMS)


def cosine(u, v):
    """Row-wise cosine; 0 where either vector has (near) zero norm"""
    dot = (u * v).sum(dim=-1)
    norm_u = u.norm(dim=-1)
    norm_v = v.norm(dim=-1)
    valid = (norm_u >= ZERO_NORM) & (norm_v >= ZERO_NORM)
    denominator = torch.where(valid, norm_u * norm_v, torch.ones_like(norm_u))
    return torch.where(valid, dot / denominator, torch.zeros_like(dot))


def bsa_loss(clean, adv, terms=BOTH_TERMS):
    """
    Sum of per-vector cosines between two FeatureStacks. ``terms`` restricts
    the sum to the image encoder ('image') or the multimodal encoder
    ('fusion').
    """
    if terms not in LOSS_TERMS:
        raise InputError(f"Unknown loss terms '{terms}'")
    if clean.shapes() != adv.shapes():
        raise InputError(f'Feature shapes differ: {clean.shapes()} vs {adv.shapes()}')
    pairs = []
    if terms in (BOTH_TERMS, IMAGE_TERMS):
        pairs += list(zip(clean.image_blocks, adv.image_blocks))
    if terms in (BOTH_TERMS, FUSION_TERMS):
        pairs += list(zip(clean.fusion_blocks, adv.fusion_blocks))
    total = adv.image_blocks[0].new_zeros(())
    for reference, perturbed in pairs:
        total = total + cosine(reference, perturbed).sum()
    return total


def _as_image(model, image):
    return torch.as_tensor(image, dtype=model.dtype)


def project(adv_image, image, sigma_i):
    """Clip into the l-inf ball around ``image`` and into [0, 1]"""
    ball = torch.min(torch.max(adv_image, image - sigma_i), image + sigma_i)
    return ball.clamp(0.0, 1.0)


def _check_iterate(adv_image, image, sigma_i):
    tolerance = torch.finfo(adv_image.dtype).eps * 2
    distance = float((adv_image - image).abs().max())
    if distance > sigma_i + tolerance or float(adv_image.min()) < 0 or float(adv_image.max()) > 1:
        raise AttackError('Iterate left the feasible set', {'distance': distance, 'sigma_i': sigma_i})


def clean_features(model, image, text):
    with torch.no_grad():
        return forward_with_features(model, _as_image(model, image), text).detach()


def init_perturbation(image, sigma_i, seed):
    """I + delta with delta ~ U[-sigma_i, sigma_i] per pixel, projected into [0, 1]"""
    image = torch.as_tensor(image)
    generator = torch.Generator().manual_seed(int(seed))
    noise = torch.rand(image.shape, generator=generator, dtype=image.dtype)
    delta = (noise * 2 - 1) * sigma_i
    return project(image + delta, image, sigma_i)


def loss_and_gradient(model, clean, adv_image, adv_text, terms=BOTH_TERMS):
    """Block-wise similarity loss at ``adv_image`` and its gradient w.r.t. the pixels"""
    adv_image = adv_image.detach().requires_grad_(True)
    features = forward_with_features(model, adv_image, adv_text)
    loss = bsa_loss(clean, features, terms=terms)
    (gradient,) = torch.autograd.grad(loss, adv_image)
    if not torch.isfinite(gradient).all():
        raise AttackError('Non-finite gradient in block-wise attack', {
            'loss': float(loss),
            'non_finite': int((~torch.isfinite(gradient)).sum()),
            'pixel_range': (float(adv_image.detach().min()), float(adv_image.detach().max())),
        })
    return float(loss), gradient


def _accumulate(state, gradient, decay):
    l1 = gradient.abs().sum()
    normalized = gradient / l1 if float(l1) > 0 else gradient
    return normalized if state is None else decay * state + normalized


def _descend(adv_image, image, direction, budget):
    stepped = adv_image.detach() - budget.step_size * direction.sign()
    adv_next = project(stepped, image, budget.sigma_i)
    _check_iterate(adv_next, image, budget.sigma_i)
    return adv_next


def bsa_step(model, image, adv_image, text, budget, clean=None, adv_text=None, terms=BOTH_TERMS):
    """
    One signed-gradient descent step on the block-wise loss.
    ``clean`` features default to (image, text); the perturbed side is
    evaluated at (adv_image, adv_text), adv_text defaulting to text.
    """
    image = _as_image(model, image)
    adv_image = _as_image(model, adv_image)
    clean = clean if clean is not None else clean_features(model, image, text)
    perturbed_text = adv_text if adv_text is not None else text
    _, gradient = loss_and_gradient(model, clean, adv_image, perturbed_text, terms=terms)
    return _descend(adv_image, image, gradient, budget)


def bsa_step_momentum(model, image, adv_image, text, budget, state, decay,
                      clean=None, adv_text=None, terms=BOTH_TERMS):
    """
    Momentum iterative step: state <- decay * state + g / ||g||_1, then a
    sign step along the state. Returns (next iterate, state).
    """
    if decay < 0:
        raise AttackError('Momentum decay must be non-negative', {'decay': decay})
    image = _as_image(model, image)
    adv_image = _as_image(model, adv_image)
    clean = clean if clean is not None else clean_features(model, image, text)
    perturbed_text = adv_text if adv_text is not None else text
    _, gradient = loss_and_gradient(model, clean, adv_image, perturbed_text, terms=terms)
    state = _accumulate(state, gradient, decay)
    return _descend(adv_image, image, state, budget), state


def bsa_iterate(model, image, adv_image, text, steps, budget, clean=None, adv_text=None,
                terms=BOTH_TERMS, loss_trace=None):
    """
    ``steps`` iterations from ``adv_image`` without re-initialisation.
    The optimizer comes from ``budget.optimizer``; momentum state lives for
    the duration of this call.
    """
    image = _as_image(model, image)
    adv_image = _as_image(model, adv_image)
    clean = clean if clean is not None else clean_features(model, image, text)
    perturbed_text = adv_text if adv_text is not None else text
    state = None
    for iteration in range(steps):
        loss, gradient = loss_and_gradient(model, clean, adv_image, perturbed_text, terms=terms)
        if budget.optimizer == 'mi':
            state = _accumulate(state, gradient, budget.momentum_decay)
            direction = state
        else:
            direction = gradient
        adv_image = _descend(adv_image, image, direction, budget)
        logger.debug('bsa iteration %s L=%.6f', iteration, loss)
        if loss_trace is not None:
            loss_trace.append(loss)
    return adv_image


def bsa_attack(model, image, text, steps, budget, seed, terms=BOTH_TERMS, loss_trace=None):
    """Random start inside the ball, then ``steps`` block-wise iterations"""
    if steps < 0:
        raise AttackError('steps must be non-negative', {'steps': steps})
    image = _as_image(model, image)
    adv_image = init_perturbation(image, budget.sigma_i, seed)
    return bsa_iterate(model, image, adv_image, text, steps, budget, terms=terms, loss_trace=loss_trace)
