import dataclasses
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from artifact_manager import ArtifactStore
from config_manager import ExperimentConfig, METHOD_ALIASES, load_config
from measures import (
    closed_form_1d,
    closed_form_2d,
    density_for_example,
    exact_map_1d,
    kpp_tilted_drift,
    sample,
    solve_elliptic_1d,
    solve_fp_invariant_1d,
    solve_parabolic_1d,
    source_for_example,
    uniform_interval,
)
from models import (
    DomainSpec,
    EllipticCoeffs1D,
    NumericalFailure,
    ParabolicCoeffs1D,
    PointMass,
    TorusCoeffs1D,
)
from neural_map import init_net, lipschitz_upper_bound
from risk import (
    RunArtifacts,
    decompose_excess_risk,
    discrete_ot_map,
    doubling_probe,
    holder_probe,
    ood_check,
    summarize_sweep,
    sweep_runs,
    w2_to_point,
)
from seed_manager import array_digest, derive_seed
from trainer import push_forward, train, validate
from transport import w2_1d, w2_point_clouds

PROBLEMS = ('closed-1d', 'closed-2d', 'elliptic', 'parabolic', 'torus', 'kpp')
DENSITIES = ('uniform', 'closed-1d', 'closed-2d', 'torus', 'kpp')
MAPS = ('exact-1d', 'identity', 'discrete-2d')


class DeepParticleGroup(click.Group):
    """Maps failures onto exit codes: 1 for usage and input errors, 2 for numerical failures"""

    def main(self, *args, **kwargs):
        kwargs['standalone_mode'] = False
        try:
            code = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("[ERROR] Aborted", err=True)
            sys.exit(1)
        except click.ClickException as e:
            e.show()
            sys.exit(1)
        except NumericalFailure as e:
            click.echo(f"[ERROR] Numerical failure: {e}", err=True)
            manifest = getattr(e, 'manifest_path', None)
            if manifest:
                click.echo(f"[ERROR] Manifest: {manifest}", err=True)
            sys.exit(2)
        except ValueError as e:
            click.echo(f"[ERROR] {e}", err=True)
            sys.exit(1)
        sys.exit(code or 0)


def experiment_options(f):
    """Flags shared by every experiment command; they override config file values"""
    f = click.option('--method', type=click.Choice(sorted(METHOD_ALIASES)), default=None,
                     help='Transport solver for W2 evaluation')(f)
    f = click.option('--workers', type=click.IntRange(min=1), default=None, help='Worker processes')(f)
    f = click.option('--out', type=click.Path(path_type=Path), default=None, help='Output directory')(f)
    f = click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None, help='Master seed (u64)')(f)
    f = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
                     help='Experiment .cfg file')(f)
    return f


def resolve_config(config_path, seed, out, workers, method) -> ExperimentConfig:
    cfg = load_config(config_path)
    return cfg.with_overrides(seed=seed, out=str(out) if out is not None else None,
                              workers=workers, method=method)


@contextmanager
def run_manifest(store: ArtifactStore, command: str, cfg: ExperimentConfig, inputs=None):
    """Writes a running manifest up front and the final one on exit"""
    config = cfg.to_dict()
    path = store.write_manifest(command, config, inputs, status='running')
    outputs = []
    try:
        yield outputs
    except NumericalFailure as e:
        store.write_manifest(command, config, inputs, outputs, status='failed', error=str(e))
        e.manifest_path = path
        raise
    store.write_manifest(command, config, inputs, outputs)


def build_problem(problem: str, n_grid: int, h0: float, h1: float, alpha: float, t_end: float):
    if problem == 'closed-1d':
        return closed_form_1d(n_grid)
    if problem == 'closed-2d':
        return closed_form_2d()
    if problem == 'elliptic':
        coeffs = EllipticCoeffs1D(a=lambda x: 1.0, b=lambda x: 0.0, c=lambda x: 0.0,
                                  g=lambda x: 0.0 if h0 + h1 > 0 else 1.0, h0=h0, h1=h1)
        return solve_elliptic_1d(coeffs, n_grid)
    if problem == 'parabolic':
        heat = EllipticCoeffs1D(a=lambda x: 1.0, b=lambda x: 0.0, c=lambda x: 0.0,
                                g=lambda x: 0.0, h0=0.0, h1=0.0)
        rho = lambda x: np.where((x > 0) & (x < 1), np.sin(np.pi * x), 0.0)
        return solve_parabolic_1d(ParabolicCoeffs1D(heat, rho, t_end, 200), n_grid)
    if problem == 'torus':
        # b = -V' for V = cos(2 pi x); the invariant density is proportional to exp(-V)
        drift = lambda x: 2.0 * np.pi * np.sin(2.0 * np.pi * x)
    else:
        drift = kpp_tilted_drift(lambda x: np.sin(2.0 * np.pi * x), alpha)
    torus = TorusCoeffs1D(b=drift, kappa=lambda x: 1.0, kappa_minus=1.0, kappa_plus=1.0)
    return solve_fp_invariant_1d(torus, n_grid)


@click.group(cls=DeepParticleGroup)
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
def cli(verbose: bool) -> None:
    """DeepParticle experiments on PDE-induced measures"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


@cli.command()
@click.option('--problem', type=click.Choice(PROBLEMS), default='closed-1d')
@click.option('--n-grid', type=click.IntRange(min=3), default=1001)
@click.option('--h0', type=float, default=0.5, help='Left Dirichlet value (elliptic)')
@click.option('--h1', type=float, default=1.5, help='Right Dirichlet value (elliptic)')
@click.option('--alpha', type=float, default=1.0, help='KPP tilt')
@click.option('--t-end', type=float, default=0.1, help='Terminal time (parabolic)')
@experiment_options
def solve(problem, n_grid, h0, h1, alpha, t_end, config_path, seed, out, workers, method) -> None:
    """Tabulate a target density and write density.csv"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    params = {'problem': problem, 'n_grid': n_grid, 'h0': h0, 'h1': h1, 'alpha': alpha, 't_end': t_end}
    with run_manifest(store, 'solve', cfg, {'params': params}) as outputs:
        density = build_problem(problem, n_grid, h0, h1, alpha, t_end)
        outputs.append(store.write_density(density))
    click.echo(f"[SUCCESS] {density.measure_id}: mass {density.total_mass():.12f}, "
               f"normalizer {density.norm_constant:.6g} -> {outputs[0]}")


@cli.command('sample')
@click.option('--example', type=click.Choice(['1d', '2d']), default=None)
@click.option('--n', 'N', type=click.IntRange(min=1), required=True, help='Sample size')
@click.option('--source', is_flag=True, help='Sample the source measure instead of the target')
@experiment_options
def sample_cmd(example, N, source, config_path, seed, out, workers, method) -> None:
    """Draw N i.i.d. points and write samples.csv"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    example = example or cfg.example
    measure = source_for_example(example) if source else density_for_example(example)
    store = ArtifactStore(cfg.out)
    with run_manifest(store, 'sample', cfg, {'example': example, 'N': N, 'source': source}) as outputs:
        draw = sample(measure, N, derive_seed(cfg.seed, 'sample', measure.measure_id, N))
        outputs.append(store.write_samples(draw))
    extra = f", acceptance {draw.info['acceptance_rate']:.4f}" if 'acceptance_rate' in draw.info else ''
    click.echo(f"[SUCCESS] {N} points from {measure.measure_id}{extra} -> {outputs[0]}")


def _training_run(cfg: ExperimentConfig, N: int):
    source = source_for_example(cfg.example)
    target = density_for_example(cfg.example)
    run_seed = derive_seed(cfg.seed, 'train', cfg.example, N)
    xs = sample(source, N, derive_seed(run_seed, 'xs'))
    ys = sample(target, N, derive_seed(run_seed, 'ys'))
    net = init_net((xs.dim, *cfg.hidden, xs.dim), derive_seed(run_seed, 'net'))
    return source, target, run_seed, xs, ys, net


@cli.command('train')
@click.option('--n', 'N', type=click.IntRange(min=2), required=True, help='Training sample size')
@click.option('--decompose/--no-decompose', default=False, help='Also write the excess-risk decomposition')
@experiment_options
def train_cmd(N, decompose, config_path, seed, out, workers, method) -> None:
    """Train one map and write history, checkpoint, assignment and validation W2"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    source, target, run_seed, xs, ys, net = _training_run(cfg, N)
    inputs = {'xs': array_digest(xs.points), 'ys': array_digest(ys.points)}
    with run_manifest(store, 'train', cfg, inputs) as outputs:
        train_cfg = dataclasses.replace(cfg.train, seed=derive_seed(run_seed, 'fit'))
        net, history = train(xs, ys, net, train_cfg)
        outputs.append(store.write_history(history))
        outputs.append(store.save_checkpoint(net, history.best_iter))

        pushed = push_forward(net, xs)
        coupling = w2_1d(pushed, ys) if xs.dim == 1 else w2_point_clouds(pushed, ys)
        outputs.append(store.write_assignment(coupling.assignment, pushed, ys))

        val_xs = sample(source, cfg.val_size, derive_seed(run_seed, 'val-xs'))
        val_ys = sample(target, cfg.val_size, derive_seed(run_seed, 'val-ys'))
        val = validate(net, val_xs, val_ys, None if xs.dim == 1 else cfg.transport)

        if decompose:
            oracle = (lambda pts: exact_map_1d(pts)) if cfg.example == '1d' else None
            artifacts = RunArtifacts(xs, ys, net, source, target, oracle=oracle,
                                     holder=(1.0, 2.0, 0.5) if cfg.example == '1d' else None,
                                     method=None if xs.dim == 1 else cfg.transport)
            report = decompose_excess_risk(artifacts, cfg.val_size, derive_seed(run_seed, 'risk'))
            outputs.append(store.write_risk([report]))

    click.echo(f"[SUCCESS] N={N}: best loss {history.best_loss:.6g} at iteration {history.best_iter} "
               f"({history.stopped_reason}), validation W2 {val.value:.6g}, "
               f"Lipschitz bound {lipschitz_upper_bound(net):.4g}")
    if history.diverged:
        click.echo("[WARNING] Training diverged; the best finite checkpoint was kept", err=True)


@cli.command()
@experiment_options
def sweep(config_path, seed, out, workers, method) -> None:
    """Rate sweep over the configured sample sizes; writes sweep.csv and rate_table.csv"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    n_list = cfg.sample_sizes()
    with run_manifest(store, 'sweep', cfg, {'n_list': n_list}) as outputs:
        rows = sweep_runs(cfg.example, n_list, cfg.repeats, cfg.train, cfg.seed, cfg.val_size,
                          cfg.transport, cfg.hidden, cfg.workers)
        fit = summarize_sweep(rows, cfg.example)
        outputs.append(store.write_sweep(rows, fit, example=cfg.example, name=f'sweep_{cfg.example}.csv'))
        outputs.append(store.write_rate_table(fit, name=f'rate_table_{cfg.example}.csv'))
    click.echo(f"[SUCCESS] {cfg.example} sweep: slope {fit.slope:.4f}, intercept {fit.intercept:.4f} "
               f"(guaranteed {fit.predicted_slope:.4f}) over {len(rows)} runs")
    if fit.excluded_runs:
        click.echo(f"[WARNING] {fit.excluded_runs} diverged run(s) excluded from the fit", err=True)


def build_density(name: str):
    if name == 'uniform':
        return uniform_interval()
    if name == 'closed-1d':
        return closed_form_1d()
    if name == 'closed-2d':
        return closed_form_2d()
    return build_problem(name, 1024, 0.0, 0.0, 1.0, 0.1)


@cli.command('probe-doubling')
@click.option('--density', 'density_name', type=click.Choice(DENSITIES), default='closed-1d')
@click.option('--trials', type=click.IntRange(min=1), default=10_000)
@experiment_options
def probe_doubling(density_name, trials, config_path, seed, out, workers, method) -> None:
    """Largest eta(E) / eta(E/2) over random ellipsoids"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    with run_manifest(store, 'probe-doubling', cfg, {'density': density_name, 'trials': trials}) as outputs:
        result = doubling_probe(build_density(density_name), trials, derive_seed(cfg.seed, 'doubling'))
        outputs.append(store.write_doubling(result, name=f'doubling_{density_name}.csv'))
    click.echo(f"[SUCCESS] {density_name}: max doubling ratio {result.max_ratio:.4f} over {trials} trials")


@cli.command('probe-holder')
@click.option('--map', 'map_name', type=click.Choice(MAPS), default='exact-1d')
@click.option('--pairs', type=click.IntRange(min=3), default=20_000)
@click.option('--n', 'N', type=click.IntRange(min=2), default=1024, help='Cloud size for discrete maps')
@experiment_options
def probe_holder(map_name, pairs, N, config_path, seed, out, workers, method) -> None:
    """Fit a Holder exponent and constant for a transport map"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    probe_seed = derive_seed(cfg.seed, 'holder', map_name)
    with run_manifest(store, 'probe-holder', cfg, {'map': map_name, 'pairs': pairs, 'N': N}) as outputs:
        if map_name == 'discrete-2d':
            mapping = discrete_ot_map(closed_form_2d(), N, derive_seed(probe_seed, 'cloud'))
            domain = DomainSpec.unit_disk()
        else:
            mapping = exact_map_1d if map_name == 'exact-1d' else (lambda pts: pts)
            domain = DomainSpec.interval()
        estimate = holder_probe(mapping, domain, pairs, probe_seed)
        outputs.append(store.write_holder(estimate, name=f'holder_{map_name}.csv'))
    click.echo(f"[SUCCESS] {map_name}: beta {estimate.beta:.4f} (lower {estimate.beta_lower:.4f}), "
               f"constant {estimate.constant:.4f} over {estimate.pairs} pairs")


@cli.command()
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Trained net; defaults to the exact 1D map')
@click.option('--n', 'N', type=click.IntRange(min=10), default=100_000, help='Validation cloud size')
@experiment_options
def ood(checkpoint, N, config_path, seed, out, workers, method) -> None:
    """Target-shift bound R(T; mu, nu1) <= R(T; mu, nu) + W2(nu, nu1) in one dimension"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    store = ArtifactStore(cfg.out)
    model = ArtifactStore.load_checkpoint(checkpoint)[0] if checkpoint else exact_map_1d
    mu, nu = uniform_interval(), closed_form_1d()
    shifted = solve_elliptic_1d(EllipticCoeffs1D(a=lambda x: 1.0, b=lambda x: 0.0, c=lambda x: 0.0,
                                                 g=lambda x: 0.0, h0=0.6, h1=1.4))
    point = PointMass((0.5,))
    base = derive_seed(cfg.seed, 'ood')
    with run_manifest(store, 'ood', cfg, {'checkpoint': checkpoint or 'exact_map_1d', 'N': N}) as outputs:
        mu_val = sample(mu, N, derive_seed(base, 'mu'))
        nu_val = sample(nu, N, derive_seed(base, 'nu'))
        configs = [
            ('no_shift', sample(nu, N, derive_seed(base, 'nu1')), None),
            ('elliptic_shift', sample(shifted, N, derive_seed(base, 'shift')), None),
            ('point_mass', sample(point, N, base), w2_to_point(nu, 0.5)),
        ]
        results = [(label, ood_check(model, mu_val, nu_val, nu1, shift_w2=shift))
                   for label, nu1, shift in configs]
        outputs.append(store.write_ood(results))
    for label, r in results:
        status = '[SUCCESS]' if r.slack >= -r.tolerance else '[WARNING]'
        click.echo(f"{status} {label}: lhs {r.lhs:.6g} <= rhs {r.rhs:.6g} (slack {r.slack:.3g}, "
                   f"tolerance {r.tolerance:.3g})")


@cli.command()
@experiment_options
def report(config_path, seed, out, workers, method) -> None:
    """Aggregate sweep CSVs into rate tables and log-log SVG plots"""
    cfg = resolve_config(config_path, seed, out, workers, method)
    if not os.path.isdir(cfg.out):
        raise click.ClickException("no sweep artifacts found")
    store = ArtifactStore(cfg.out)
    paths = store.find_sweeps()
    if not paths:
        raise click.ClickException("no sweep artifacts found")

    by_example = {}
    for path in paths:
        rows, example = ArtifactStore.read_sweep(path)
        by_example.setdefault(example, []).extend(rows)

    with run_manifest(store, 'report', cfg, {'sweeps': paths}) as outputs:
        for example, rows in sorted(by_example.items()):
            fit = summarize_sweep(rows, example)
            outputs.append(store.write_rate_table(fit, name=f'report_rate_table_{example}.csv'))
            svg = store.plot_rate(fit, name=f'rate_{example}.svg', title=f'{example} example')
            outputs.append(svg)
            click.echo(f"[SUCCESS] {example}: log10 W2 = {fit.slope:.4f} log10 N + {fit.intercept:.4f} "
                       f"({len(rows)} runs) -> {svg}")


if __name__ == '__main__':
    cli()
