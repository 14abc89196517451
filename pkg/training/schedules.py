"""
Weight schedules, learning-rate decay and management event timing.

Iterations are counted from 1 inside each stage; iteration 0 is the state
before the first step.
"""
import math


def linear(start, end, iteration, total):
    """``start`` at iteration 0, ``end`` at ``total``, clamped outside."""
    if total <= 0:
        return end
    progress = min(max(iteration / total, 0.0), 1.0)
    return start + (end - start) * progress


def exponential(initial, final, iteration, total):
    """Log-linear interpolation from ``initial`` to ``final`` over ``total`` iterations."""
    if total <= 0 or initial == final:
        return final
    progress = min(max(iteration / total, 0.0), 1.0)
    return math.exp(math.log(initial) * (1.0 - progress) + math.log(final) * progress)


def warmup_weights(iteration, plan, loss):
    """(λ_n, λ_s) of the first CoRe stage."""
    total = plan.stage1_iterations
    return (linear(loss.lambda_n_start, loss.lambda_n_end, iteration, total),
            linear(loss.lambda_s_start, loss.lambda_s_end, iteration, total))


def refine_weights(iteration, plan, loss):
    return loss.refine_lambda_n, loss.refine_lambda_s


def manage_weights(iteration, plan, loss):
    """Warm-up schedules stretched over the management run, with λ_n raised once the switch is reached."""
    total = plan.manage_iterations
    lambda_s = linear(loss.lambda_s_start, loss.lambda_s_end, iteration, total)
    if iteration >= plan.manage_lambda_n_from:
        return loss.manage_lambda_n, lambda_s
    return linear(loss.lambda_n_start, loss.lambda_n_end, iteration, total), lambda_s


def position_lr(iteration, total, optimizer_config, extent):
    lr = optimizer_config.position_lr * extent
    return exponential(lr, lr * optimizer_config.position_lr_final_factor, iteration, total)


def _periodic(iteration, interval, start, stop):
    return iteration > 0 and start <= iteration < stop and iteration % interval == 0


def densify_due(iteration, plan, management):
    return _periodic(iteration, management.densify_interval, plan.densify_from, plan.densify_until)


def separate_allowed(iteration, plan):
    return plan.separate_from <= iteration < plan.separate_until


def prune_due(iteration, plan, management):
    return _periodic(iteration, management.prune_interval, plan.prune_from, plan.prune_until)


def sh_due(iteration, management):
    return iteration > 0 and iteration % management.sh_interval == 0


def warmup_densify_due(iteration, plan, management):
    return _periodic(iteration, management.densify_interval, plan.warmup_densify_from, plan.warmup_densify_until)


def event_iterations(predicate, total):
    """Every iteration in 1..total where ``predicate`` holds."""
    return [iteration for iteration in range(1, total + 1) if predicate(iteration)]
