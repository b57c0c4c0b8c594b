"""Risk delta of swapping a standard classifier for a hardened one.

The delta weighs a clean-accuracy cost against a robustness gain:
(1 - alpha) * delta_err * impact_error + alpha * delta_adv * impact_theft,
where alpha is the malicious fraction of abnormal traffic.  The break-even
alpha is where the delta crosses zero.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class RiskInput:
    delta_err: float    # error-probability delta (hardened minus standard)
    delta_adv: float    # theft-probability delta, typically negative
    impact_error: float
    impact_theft: float
    alpha: float        # malicious fraction of abnormal traffic

    def __post_init__(self):
        if self.impact_error < 0 or self.impact_theft < 0:
            raise ValueError("impacts must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


def risk_delta(r: RiskInput) -> float:
    return ((1.0 - r.alpha) * r.delta_err * r.impact_error
            + r.alpha * r.delta_adv * r.impact_theft)


def break_even_alpha(delta_err: float, delta_adv: float,
                     impact_error: float, impact_theft: float) -> "float | str":
    """Malicious fraction above which the hardened model pays off.

    Returns "always" when there is no precision cost but a robustness gain,
    "never" when there is a precision cost but no robustness gain, and the
    crossing point otherwise.
    """
    if impact_error < 0 or impact_theft < 0:
        raise ValueError("impacts must be >= 0")
    err_term = delta_err * impact_error
    adv_term = delta_adv * impact_theft
    if err_term == 0 and adv_term == 0:
        raise ValueError("break-even alpha is undefined when both terms are zero")
    if delta_adv >= 0 and delta_err > 0:
        return "never"
    if delta_err <= 0 and delta_adv < 0:
        return "always"
    denominator = err_term - adv_term
    if denominator > 0:
        return err_term / denominator
    raise ValueError(
        "break-even alpha is undefined for a favorable precision delta with an "
        "adverse robustness delta"
    )
