import itertools
import logging
import os
import time
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

from ..config import settings
from ..exceptions import DivergenceError, InvalidArgumentError
from ..models.distributions import derivative_of, white_noise_distribution
from ..models.germs import CoherenceClass, ProductGerm
from ..models.grid_field import DeclaredClass, FieldKind, GridField, constant_field, field_from_function
from ..models.schemas import ExperimentConfig, ExperimentKind, RunResponse
from ..models.test_function import TestFunction
from ..services.artifact_service import ArtifactService, config_hash
from ..services.calculus import (
    additivity_residual,
    germ_primitive,
    ito_product,
    ito_reconstruction_report,
    primitive,
    smooth_young_integral,
    young_product,
)
from ..services.holder import (
    ConditioningContext,
    distribution_norm,
    fit_rate,
    resample_sensitivity,
    stochastic_seminorms,
    table_rows,
)
from ..services.increments import (
    IndexSet,
    check_composition_identity,
    check_product_identity,
    evaluate_terms,
    rect_increment,
    shift_expand,
)
from ..services.noise import (
    NoiseSample,
    brownian_sheet,
    deterministic_driver,
    sample_white_noise,
)
from ..services.reconstruction import reconstruct, verify_characterization
from ..services.sewing import (
    ProductTwoPointGerm,
    additivity_defect,
    scaling_report,
    sew,
    sewing_reconstruction_bridge,
)
from ..services.spde import (
    SpdeProblem,
    mesh_convergence_study,
    picard_step,
    regularity_report,
    sigma_from_name,
    solve,
    sup_l2_distance,
)
from ..services.wavelets import WaveletBasisD, build_basis

logger = logging.getLogger(__name__)

# conditional entries are estimated on at most this many samples
_CONDITIONING_SAMPLES = 200


def _random_polynomial(rng: np.random.Generator, d: int) -> Callable[[np.ndarray], float]:
    exponents = [e for e in itertools.product(range(4), repeat=d) if sum(e) <= 3]
    coeffs = rng.standard_normal(len(exponents))
    powers = np.array(exponents)

    def poly(z):
        z = np.asarray(z, dtype=float)
        return float(np.dot(coeffs, np.prod(z[None, :] ** powers, axis=1)))

    return poly


def _conditioning_noise(noise: NoiseSample) -> NoiseSample:
    if noise.M <= _CONDITIONING_SAMPLES:
        return noise
    return NoiseSample(noise.field.sample_slice(0, _CONDITIONING_SAMPLES), noise.seed)


def _corner(field: GridField) -> np.ndarray:
    """Per-sample value at the top corner (T, ..., T)."""
    return field.data[(slice(None),) + (-1,) * field.d]


class ExperimentController:
    def __init__(self):
        self._runners: Dict[ExperimentKind, Callable[[ExperimentConfig, ArtifactService], Tuple[str, Dict[str, Any]]]] = {
            ExperimentKind.IDENTITY_SUITE: self._identity_suite,
            ExperimentKind.NOISE_RATES: self._noise_rates,
            ExperimentKind.RECONSTRUCT: self._reconstruct,
            ExperimentKind.WALSH_CHECK: self._walsh_check,
            ExperimentKind.YOUNG_CHECK: self._young_check,
            ExperimentKind.PRIMITIVE_CHECK: self._primitive_check,
            ExperimentKind.SPDE_SOLVE: self._spde_solve,
            ExperimentKind.SPDE_RATES: self._spde_rates,
            ExperimentKind.SEWING_BRIDGE: self._sewing_bridge,
        }

    def get_experiment_kinds(self) -> List[str]:
        return [kind.value for kind in ExperimentKind]

    def output_dir_for(self, config: ExperimentConfig) -> str:
        if config.output_dir:
            return config.output_dir
        return os.path.join(settings.output_dir, f"{config.kind.value}-{config_hash(config)[:12]}")

    def run(self, config: ExperimentConfig) -> RunResponse:
        """Run one experiment and write its artifacts and manifest."""
        start_time = time.time()
        artifacts = ArtifactService(self.output_dir_for(config))
        logger.info(f"Starting experiment {config.kind.value} (seed={config.seed}) in {artifacts.output_dir}")

        try:
            status, summary = self._runners[config.kind](config, artifacts)
        except DivergenceError as e:
            processing_time = time.time() - start_time
            logger.error(f"Experiment {config.kind.value} diverged: {str(e)}")
            artifacts.write_manifest(config, processing_time, status="diverged",
                                     diagnostics={"error": str(e), **e.diagnostics})
            raise

        processing_time = time.time() - start_time
        artifacts.write_manifest(config, processing_time, status=status, diagnostics=summary)
        logger.info(f"Experiment {config.kind.value} finished with status {status} in {processing_time:.2f} seconds")
        return RunResponse(
            kind=config.kind.value,
            status=status,
            output_dir=str(artifacts.output_dir),
            artifacts=sorted(set(artifacts.artifacts)) + ["manifest.json"],
            summary=summary,
            processing_time=processing_time,
        )

    # helpers ---------------------------------------------------------------------

    def _basis(self, config: ExperimentConfig) -> WaveletBasisD:
        base = build_basis(config.wavelet.family, config.wavelet.r, config.wavelet.depth)
        return WaveletBasisD(base, config.d)

    def _noise(self, config: ExperimentConfig, N: int = None) -> NoiseSample:
        return sample_white_noise(N or config.N, config.T, config.d, config.M, config.seed)

    def _problem(self, config: ExperimentConfig, N: int) -> SpdeProblem:
        spde = config.spde
        driver = deterministic_driver(spde.driver, N, config.T, config.d, spde.hurst)
        sigma, lipschitz = sigma_from_name(spde.sigma)
        return SpdeProblem(
            driver=driver,
            f=constant_field(spde.f, N, config.T, config.d, label="f"),
            sigma=sigma,
            sigma_lipschitz=lipschitz,
            boundary=spde.v0,
            alpha=(spde.alpha,) * config.d,
            beta=(spde.beta,) * config.d,
            delta=(spde.delta,) * config.d,
            override=spde.override,
            label=f"sigma={spde.sigma}, f={spde.f}, Z={spde.driver}",
        )

    # runners ---------------------------------------------------------------------

    def _identity_suite(self, config, artifacts):
        d = config.d
        rng = np.random.Generator(np.random.Philox(key=config.seed))
        counts: Dict[str, List[int]] = {"composition": [0, 0], "product": [0, 0], "shift": [0, 0]}
        subsets = IndexSet.all_subsets(d)
        for _ in range(config.samples):
            f = _random_polynomial(rng, d)
            g = _random_polynomial(rng, d)
            x = rng.random(d)
            y = rng.random(d)
            for theta1, theta2 in itertools.product(subsets, subsets):
                if not theta1.isdisjoint(theta2):
                    continue
                counts["composition"][0] += check_composition_identity(theta1, theta2, x, y, f)
                counts["composition"][1] += 1
                direct = rect_increment(theta1, x, y, f)
                expanded = evaluate_terms(shift_expand(theta1, theta2, x, y), y, f)
                counts["shift"][0] += bool(abs(direct - expanded) <= settings.identity_tolerance * max(1.0, abs(direct)))
                counts["shift"][1] += 1
            for theta in subsets:
                counts["product"][0] += check_product_identity(theta, x, y, f, g)
                counts["product"][1] += 1
        rows = [{"identity": name, "passed": p, "total": t} for name, (p, t) in counts.items()]
        artifacts.write_csv("identity_suite.csv", rows, ["identity", "passed", "total"])
        all_passed = all(p == t for p, t in counts.values())
        return ("ok" if all_passed else "failed"), {"checks": {k: v[1] for k, v in counts.items()},
                                                      "all_passed": all_passed}

    def _noise_rates(self, config, artifacts):
        noise = self._noise(config)
        sheet = brownian_sheet(noise)
        cond = _conditioning_noise(noise)
        sheet_table = stochastic_seminorms(
            sheet, 0.45, 1.0, 2.0, ConditioningContext(cond, rebuild=brownian_sheet, linear=True), seed=config.seed)
        xi = white_noise_distribution(noise)
        xi_report = distribution_norm(
            xi, -0.5, 1.0, 2.0, ConditioningContext(cond, rebuild=white_noise_distribution, linear=True),
            seed=config.seed)

        rows = [{"object": "B", **row} for row in table_rows(sheet_table)]
        artifacts.write_csv("sheet_seminorms.csv", rows,
                            ["object", "theta", "eta", "separation", "size", "value", "se", "slope", "r2"])
        sheet_fits = [sheet_table.entry([i + 1]).fit for i in range(config.d)]
        sheet_slopes = [fit.slope if fit else None for fit in sheet_fits]
        noise_slopes = [fit.slope for fit in xi_report.fits]
        rate_rows = [{"object": "B", "axis": i + 1, "slope": s} for i, s in enumerate(sheet_slopes)]
        rate_rows += [{"object": "xi", "axis": fit.axis, "slope": fit.slope, "r2": fit.r2} for fit in xi_report.fits]
        artifacts.write_csv("noise_rates.csv", rate_rows, ["object", "axis", "slope", "r2"])
        artifacts.write_json("white_noise_norm.json", xi_report)
        tol = settings.rate_tolerance
        passed = (all(s is not None and abs(s - 0.5) <= tol for s in sheet_slopes)
                  and len(noise_slopes) == config.d
                  and all(abs(s + 0.5) <= tol for s in noise_slopes))
        return ("ok" if passed else "failed"), {"sheet_slopes": sheet_slopes, "noise_slopes": noise_slopes,
                                                "noise_norm": xi_report.value,
                                                "flags": sheet_table.flags + xi_report.flags}

    def _reconstruct(self, config, artifacts):
        d, T = config.d, config.T
        noise = self._noise(config)
        basis = self._basis(config)
        germ = ProductGerm(brownian_sheet(noise), white_noise_distribution(noise), field_builder=brownian_sheet,
                           declared=CoherenceClass((-0.5,) * d, (0.0,) * d, (float("inf"),) * d), label="B*xi")
        psi = TestFunction.indicator([T / 4] * d, [3 * T / 4] * d, T)
        result = reconstruct(germ, IndexSet.full(d), [T / 4] * d, psi, basis, config.n_max)
        rows = [{"level": k, "cauchy_increment": inc, "se": se}
                for k, inc, se in zip(result.log.levels[1:], result.log.increments, result.log.increment_se)]
        artifacts.write_csv("reconstruction_log.csv", rows, ["level", "cauchy_increment", "se"])
        report = verify_characterization(germ, germ.declared, basis, noise=noise, seed=config.seed)
        artifacts.write_json("characterization.json", report)
        sensitivity = resample_sensitivity(germ, ConditioningContext(_conditioning_noise(noise)))
        artifacts.write_json("resample_sensitivity.json", sensitivity)
        summary = {
            "converged": result.log.converged,
            "decay_slope": result.log.fit.slope if result.log.fit else None,
            "characterization_passed": report.passed,
            "scaling_slopes": {k: fit.slope for k, fit in report.scaling_fits.items()},
            "predicted": report.predicted,
            "resample_relative_change": sensitivity["relative_change"],
        }
        if result.log.diverged:
            raise DivergenceError("Partial reconstructions did not converge", {"increments": result.log.increments})
        return ("ok" if report.passed else "failed"), summary

    def _walsh_check(self, config, artifacts):
        noise = self._noise(config)
        basis = self._basis(config)
        sheet = brownian_sheet(noise)
        germ = ito_product(sheet, noise, u_builder=brownian_sheet)
        reconstructed = germ_primitive(germ, basis, noise.N)
        direct = GridField(sheet.lower_left() * noise.data, noise.T, FieldKind.CELL_DENSITY).cumulative()
        error = float(np.max(np.abs(reconstructed.data - direct.data)))
        scale = max(1.0, float(np.max(np.abs(direct.data))))
        cond = _conditioning_noise(noise)
        report = ito_reconstruction_report(brownian_sheet(cond), cond, basis, u_builder=brownian_sheet)
        rows = [{"metric": "primitive_max_error", "value": error}]
        rows += [{"metric": key, "value": value} for key, value in sorted(report.items())]
        artifacts.write_csv("walsh_check.csv", rows, ["metric", "value"])
        passed = error <= 1e-10 * scale
        return ("ok" if passed else "failed"), {"primitive_max_error": error, **report}

    def _young_check(self, config, artifacts):
        d, T, N = config.d, config.T, config.N
        spde = config.spde
        basis = WaveletBasisD(build_basis("haar"), d)
        smooth = spde.driver != "frozen_fbm_sheet"
        finest = 4 * N if smooth else min(4 * N, settings.fbm_cholesky_cap)
        levels = [n for n in (N // 8, N // 4, N // 2, N) if n >= 2]
        fine_driver = None if smooth else deterministic_driver(spde.driver, finest, T, d, spde.hurst)

        def value_at(n: int) -> float:
            if smooth:
                driver = deterministic_driver(spde.driver, n, T, d)
            else:
                driver = fine_driver.coarsen(finest // n)
            u = field_from_function(lambda p: 1.0 + np.prod(p, axis=-1), n, T, d,
                                    declared=DeclaredClass((1.0,) * d, (0.0,) * d, float("inf")), label="u")
            germ = young_product(u, derivative_of(driver))
            return float(_corner(germ_primitive(germ, basis, n))[0])

        # smooth drivers have an exact value; the fBm sheet is checked against a finer mesh
        if smooth:
            oracle, oracle_N = smooth_young_integral(spde.driver, T, d), "exact"
        else:
            oracle, oracle_N = value_at(finest), finest
        values = [value_at(n) for n in levels]
        errors = [abs(v - oracle) for v in values]
        rows = [{"N": n, "value": v, "error_vs_oracle": e} for n, v, e in zip(levels, values, errors)]
        rows.append({"N": oracle_N, "value": oracle, "error_vs_oracle": 0.0})
        artifacts.write_csv("young_check.csv", rows, ["N", "value", "error_vs_oracle"])
        try:
            rate = fit_rate([T / n for n in levels], errors).slope
        except InvalidArgumentError:
            logger.warning(f"Young check at N={N} has too few usable levels for a rate fit")
            rate = None
        threshold = settings.young_min_rate if smooth else 0.0
        passed = rate is not None and (rate >= threshold if smooth else rate > threshold)
        return ("ok" if passed else "failed"), {"oracle": oracle, "errors": errors, "rate": rate,
                                                "min_rate": threshold}

    def _primitive_check(self, config, artifacts):
        d, T = config.d, config.T
        noise = self._noise(config)
        basis = self._basis(config)
        xi = white_noise_distribution(noise)
        result = primitive(xi, basis, seed=config.seed)
        sheet = brownian_sheet(noise)
        exact_error = float(np.max(np.abs(result.field.data - sheet.data)))
        additivity = additivity_residual(xi, [T / 4] * d, [3 * T / 4] * d, [T / 2] * d, basis)
        xi_report = distribution_norm(xi, -0.5, seed=config.seed)
        table = stochastic_seminorms(result.field, 0.45, seed=config.seed)
        full = table.entry(list(range(1, d + 1)))
        prim_slopes = [fit.slope for fit in full.axis_fits]
        noise_slopes = [fit.slope for fit in xi_report.fits]
        upgrades = [p - n for p, n in zip(prim_slopes, noise_slopes)]
        rows = [{"axis": i + 1, "distribution_slope": n, "primitive_slope": p, "upgrade": u}
                for i, (n, p, u) in enumerate(zip(noise_slopes, prim_slopes, upgrades))]
        artifacts.write_csv("primitive_check.csv", rows, ["axis", "distribution_slope", "primitive_slope", "upgrade"])
        passed = exact_error <= 1e-12 * max(1.0, float(np.max(np.abs(sheet.data)))) and additivity < 1e-8
        return ("ok" if passed else "failed"), {
            "max_error_vs_sheet": exact_error, "additivity_residual": additivity,
            "crosscheck_error": result.crosscheck_error, "upgrades": upgrades, "notes": result.notes,
        }

    def _spde_solve(self, config, artifacts):
        spde = config.spde
        noise = self._noise(config)
        problem = self._problem(config, noise.N)
        solution = solve(problem, noise, tol=spde.tol, max_iter=spde.max_iter, patching=spde.patching)
        artifacts.save_field("solution.bin", solution.u)
        artifacts.write_csv("spde_iterations.csv", solution.iteration_rows(),
                            ["iteration", "sup_l2_difference", "ratio"])
        report = regularity_report(solution, problem, seed=config.seed)
        artifacts.write_csv("spde_regularity.csv", table_rows(report["table"]),
                            ["theta", "eta", "separation", "size", "value", "se", "slope", "r2"])
        summary = {
            "iterations": solution.iterations,
            "max_ratio": max(solution.ratios) if solution.ratios else 0.0,
            "contraction_ratio": solution.contraction_ratio,
            "patches": solution.patches,
            "exponents": report["exponents"],
            "regularity_passed": report["passed"],
        }
        if noise.N <= 64 and self._basis(config).base.family == "haar":
            fast = picard_step(solution.u, problem, noise)
            slow = picard_step(solution.u, problem, noise, self._basis(config), path="reconstruction")
            summary["reconstruction_path_difference"] = sup_l2_distance(fast.data, slow.data)
        passed = solution.contraction_ratio < 1.0 and bool(report["passed"])
        return ("ok" if passed else "failed"), summary

    def _spde_rates(self, config, artifacts):
        levels = sorted(config.spde.levels)
        noise = self._noise(config, N=levels[-1])
        problem = self._problem(config, levels[-1])
        study = mesh_convergence_study(problem, levels, noise)
        artifacts.write_csv("spde_rates.csv", study.rows(), ["N", "l2_difference_to_2N"])
        rate = study.fit.slope if study.fit else None
        # levels that agree to solver tolerance need no rate
        exact = bool(study.errors) and all(e <= config.spde.tol for e in study.errors)
        passed = exact or (rate is not None and rate > 0)
        return ("ok" if passed else "failed"), {"levels": study.levels, "errors": study.errors, "rate": rate}

    def _sewing_bridge(self, config, artifacts):
        d, T = config.d, config.T
        noise = self._noise(config)
        basis = self._basis(config)
        sheet = brownian_sheet(noise)
        germ = ProductTwoPointGerm(sheet, sheet, builder=lambda nz: (brownian_sheet(nz),) * 2, label="B_s box B")
        bridge = sewing_reconstruction_bridge(germ, basis, [0.0] * d, TestFunction.bump(T, d), n=config.level)

        origin, top = np.zeros(d), np.full(d, T)
        sewn = sew(germ, IndexSet.full(d), origin, top)
        artifacts.write_csv("sewing_log.csv", sewn.rows(), ["level", "mean", "cauchy_increment"])
        walsh = (sheet.lower_left() * noise.data).reshape(noise.M, -1).sum(axis=1)
        walsh_gap = float(np.sqrt(np.mean((sewn.values - walsh) ** 2)) / np.sqrt(np.mean(walsh ** 2)))
        additivity = additivity_defect(germ, IndexSet.full(d), origin, top / 2, top)

        reports = [
            scaling_report(germ, IndexSet.empty(d), predicted=d / 2.0, seed=config.seed),
            scaling_report(germ, IndexSet.full(d), predicted=float(d), seed=config.seed),
        ]
        rows = [{"theta": IndexSet.of(r["theta"], d).label(), "slope": r["fit"].slope if r["fit"] else "",
                 "predicted": r["predicted"], "passed": r["passed"]} for r in reports]
        artifacts.write_csv("sewing_scaling.csv", rows, ["theta", "slope", "predicted", "passed"])
        # the two sides of the bridge coincide only when the wavelets resolve the grid
        bridge_ok = bridge["level"] < int(np.log2(noise.N)) or bridge["relative_l2"] < 1e-8
        passed = bridge_ok and walsh_gap < 1e-8 and additivity < 1e-8
        return ("ok" if passed else "failed"), {
            "bridge_relative_l2": bridge["relative_l2"], "walsh_relative_gap": walsh_gap,
            "additivity_defect": additivity, "scaling": rows,
        }


# Create controller instance
experiment_controller = ExperimentController()
