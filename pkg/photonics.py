# photonics.py
# Spin-photon interface arithmetic: Purcell factors, the coherent-photon
# detection budget and collection efficiency constants.
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import pandas as pd

from common import SCHEMA_VERSION
from errors import DomainError


PURCELL_PREFACTOR = 3.0 / (4.0 * math.pi ** 2)
CAVITY_Q = 2000.0
CAVITY_V_MODE = 1.0          # (lambda/n)^3
SNSPD_QE = 1.0
# far-field collection efficiency by objective NA, from cavity simulations
ETA_NA: Dict[float, float] = {0.9: 0.96, 0.5: 0.78}
BUDGET_COLUMNS = ["quantity", "value", "unit", "provenance"]


@dataclass(frozen=True)
class LifetimeSet:
    tau_bulk: float = 4.12    # ns
    tau_on: float = 2.32      # ns, cavity on resonance
    tau_off: float = 5.56     # ns, cavity detuned
    xi_zpl: float = 0.36

    def __post_init__(self):
        if min(self.tau_bulk, self.tau_on, self.tau_off) <= 0:
            raise DomainError("lifetimes must be > 0")
        if self.tau_on >= self.tau_off:
            raise DomainError(f"tau_on ({self.tau_on}) must be < tau_off ({self.tau_off}): no enhancement")
        if not 0 < self.xi_zpl <= 1:
            raise DomainError(f"xi_zpl must be in (0, 1], got {self.xi_zpl}")


@dataclass(frozen=True)
class PhotonBudget:
    quantum_efficiency: float = 0.80
    zpl_fraction: float = 0.57
    c_line_fraction: float = 0.80
    psb_fraction: float = 0.43
    psb_after_filter: float = 0.35
    detector_qe: float = 0.65
    readout_counts: float = 18.0
    t_m_us: float = 50.0
    tau_emitter_ns: float = 5.0

    def __post_init__(self):
        for name in ("quantum_efficiency", "zpl_fraction", "c_line_fraction",
                     "psb_fraction", "psb_after_filter", "detector_qe"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise DomainError(f"{name} must be in (0, 1], got {v}")
        if abs(self.zpl_fraction + self.psb_fraction - 1.0) > 1e-9:
            raise DomainError("zpl_fraction + psb_fraction must equal 1")
        if self.readout_counts < 0:
            raise DomainError(f"readout_counts must be >= 0, got {self.readout_counts}")
        if self.tau_emitter_ns <= 0:
            raise DomainError(f"tau_emitter_ns must be > 0, got {self.tau_emitter_ns}")
        if self.t_m_us <= 0:
            raise DomainError(f"t_m_us must be > 0, got {self.t_m_us}")

    @property
    def zpl_to_psb_ratio(self) -> float:
        return self.zpl_fraction * self.c_line_fraction / self.psb_after_filter


@dataclass(frozen=True)
class Detection:
    photon_total: float
    zpl_to_psb_ratio: float
    photon_zpl: float          # unrounded chain
    photon_zpl_rounded: int    # rounded up to a whole photon
    p_det: float
    p_det_rounded: float


def purcell_from_lifetimes(lifetimes: LifetimeSet) -> float:
    l = lifetimes
    return (l.tau_bulk / l.tau_on - l.tau_bulk / l.tau_off) / l.xi_zpl


def purcell_from_cavity(wavelength_over_n: float, q: float, v_mode: float,
                        volume_in_cubic_wavelengths: bool = False) -> float:
    """3/(4 pi^2) (lambda/n)^3 Q/V.

    With ``volume_in_cubic_wavelengths`` the mode volume is already given in
    units of (lambda/n)^3 and the wavelength drops out.
    """
    if min(wavelength_over_n, q, v_mode) <= 0:
        raise DomainError("wavelength, Q and mode volume must be > 0")
    if volume_in_cubic_wavelengths:
        return PURCELL_PREFACTOR * q / v_mode
    return PURCELL_PREFACTOR * wavelength_over_n ** 3 * q / v_mode


def detection_probability(budget: PhotonBudget, detector_qe_target: Optional[float] = None) -> Detection:
    """Coherent ZPL photons detected per emission cycle.

    The readout window holds t_m / tau photon emissions. PSB counts convert to
    ZPL C-line counts by the branching ratio, are divided by the readout
    detector QE and multiplied by the target detector QE (same detector when
    unset). Both the raw chain and a whole-photon round-up are reported.
    """
    if budget.tau_emitter_ns <= 0:
        raise DomainError("tau_emitter_ns must be > 0")
    target = budget.detector_qe if detector_qe_target is None else detector_qe_target
    if not 0 < target <= 1:
        raise DomainError(f"detector_qe_target must be in (0, 1], got {target}")
    photon_total = budget.t_m_us * 1000.0 / budget.tau_emitter_ns
    ratio = budget.zpl_to_psb_ratio
    photon_zpl = budget.readout_counts * ratio / budget.detector_qe * target
    # strip float noise before rounding up, 23.4 -> 24 but 24.0000000001 -> 24
    rounded = int(math.ceil(round(photon_zpl, 9)))
    return Detection(
        photon_total=photon_total,
        zpl_to_psb_ratio=ratio,
        photon_zpl=photon_zpl,
        photon_zpl_rounded=rounded,
        p_det=photon_zpl / photon_total,
        p_det_rounded=rounded / photon_total,
    )


def collection_efficiency(na: float) -> float:
    try:
        return ETA_NA[na]
    except KeyError:
        raise DomainError(f"no stored collection efficiency for NA {na}; known: {sorted(ETA_NA)}") from None


def budget_table(lifetimes: LifetimeSet = LifetimeSet(), budget: PhotonBudget = PhotonBudget(),
                 cavity_q: float = CAVITY_Q, cavity_v_mode: float = CAVITY_V_MODE) -> pd.DataFrame:
    same = detection_probability(budget)
    snspd = detection_probability(budget, SNSPD_QE)
    rows: List[dict] = [
        {"quantity": "purcell_lifetimes", "value": purcell_from_lifetimes(lifetimes), "unit": "",
         "provenance": "(tau_bulk/tau_on - tau_bulk/tau_off)/xi_zpl"},
        {"quantity": "purcell_cavity", "value": purcell_from_cavity(1.0, cavity_q, cavity_v_mode, True),
         "unit": "", "provenance": "3/(4 pi^2) Q/V, V in (lambda/n)^3"},
        {"quantity": "zpl_to_psb_ratio", "value": same.zpl_to_psb_ratio, "unit": "",
         "provenance": "zpl_fraction*c_line_fraction/psb_after_filter"},
        {"quantity": "photon_total", "value": same.photon_total, "unit": "photons",
         "provenance": "t_m/tau_emitter"},
        {"quantity": "photon_zpl", "value": same.photon_zpl, "unit": "photons",
         "provenance": "readout_counts*ratio, readout detector"},
        {"quantity": "photon_zpl_rounded", "value": same.photon_zpl_rounded, "unit": "photons",
         "provenance": "photon_zpl rounded up"},
        {"quantity": "p_det", "value": same.p_det, "unit": "", "provenance": "photon_zpl/photon_total"},
        {"quantity": "p_det_rounded", "value": same.p_det_rounded, "unit": "",
         "provenance": "photon_zpl_rounded/photon_total"},
        {"quantity": "p_det_snspd", "value": snspd.p_det, "unit": "",
         "provenance": f"detector QE {SNSPD_QE:g} instead of {budget.detector_qe:g}"},
    ]
    for na, eta in sorted(ETA_NA.items()):
        rows.append({"quantity": f"eta_na_{na:g}", "value": eta, "unit": "",
                     "provenance": "stored far-field collection constant"})
    return pd.DataFrame(rows, columns=BUDGET_COLUMNS)


def budget_document(table: pd.DataFrame) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "quantities": {
            row.quantity: {"value": row.value, "unit": row.unit, "provenance": row.provenance}
            for row in table.itertuples(index=False)
        },
    }
