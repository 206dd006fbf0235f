//! Command-line front end.
//!
//! Five subcommands cover the whole surface:
//!
//! - `train`: one federated run from a JSON config, driven in-process
//!   through the same message codec a networked run uses. An optional
//!   cross-check repeats the run unmasked and fails loudly on any
//!   divergence.
//! - `verify`: the full battery of protocol checks, printed one pass/fail
//!   line each; any failing line makes the command exit non-zero.
//! - `attack`: the adversarial probes, reported as JSON on stdout.
//! - `serve` / `join`: the same run split across real TCP endpoints.
//!
//! Exit codes: 0 success, 1 a verification claim failed, 2 input/output
//! trouble, 3 malformed shapes or protocol violations, 4 timeouts, 5 bad
//! usage.

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::{
    ambiguity_batch, argmax_guess_experiment, gradient_ambiguity_demo, params_rel_err,
    GuessConfig, GuessStrategy,
};
use crate::client::{forward_masked, local_update, local_update_with_swapped_groups};
use crate::config::{RunConfig, TransportConfig};
use crate::error::{Error, Result};
use crate::gradcheck::central_diff_check;
use crate::model::{
    fedavg_step, forward_plain, local_gradient_plain, loss_mse, GradientSet, LayerDims,
    MlpParams, Sample,
};
use crate::net::{accept_clients, run_client, run_server_rounds, InProcTransport, TcpConfig};
use crate::numeric::{rel_err_matrices, rel_err_scalar, rel_err_vectors};
use crate::perturb::{mask_model, recover_gradient, sample_secret, MaskedAggregate, NoiseConfig};
use crate::report::{
    metrics_csv_string, param_hash_exact, strip_wall_ms, write_manifest, write_metrics_csv,
    RunManifest,
};
use crate::server::{
    data_rng, init_rng, mask_rng, BatchPolicy, LocalClient, MaskedRoundState, RoundMode,
    TrainOptions,
};
use crate::tensor::Vector;

/// Recovered gradients must match the plain path to this relative error.
const GRAD_TOL: f64 = 1e-9;
/// Recovered losses must match the plain path to this relative error.
const LOSS_TOL: f64 = 1e-9;
/// Final weights of dual runs must agree to this relative error.
const PARAM_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "fedmask",
    version,
    about = "Accuracy-lossless weight masking for federated ReLU networks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training from a config file, in-process.
    Train(TrainArgs),
    /// Run every protocol check and print one line per check.
    Verify(VerifyArgs),
    /// Run an adversarial probe and print its JSON report.
    Attack {
        #[command(subcommand)]
        probe: AttackCmd,
    },
    /// Host the server side of a run over TCP.
    Serve(ServeArgs),
    /// Join a TCP run as one client.
    Join(JoinArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured round mode (`plain` or `masked`).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RoundMode>,
    /// Override the configured round count.
    #[arg(long)]
    rounds: Option<u64>,
    /// Override the configured client count.
    #[arg(long)]
    clients: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override the configured coefficient group count.
    #[arg(long)]
    partition_groups: Option<usize>,
    /// Override the metrics CSV output path.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// Override the manifest output path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// After a masked run, repeat it unmasked with the same seed and fail
    /// unless gradients, losses and final weights agree within tolerance.
    #[arg(long)]
    check_against_plain: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for every randomized check; same seed, same battery.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trials per strategy and group count in the guessing experiment.
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    /// Deliberately corrupt client correction terms to prove the battery
    /// catches them. With at least two coefficient groups this must fail.
    #[arg(long, hide = true)]
    inject_swapped_corrections: bool,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Build alternative weights that reproduce observed masked broadcasts.
    Ambiguity {
        /// Layer widths, e.g. `4,8,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Show many plain gradients consistent with one masked upload.
    GradAmbiguity {
        /// Layer widths, e.g. `4,8,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 8)]
        candidates: usize,
        #[arg(long, default_value_t = 6)]
        shard_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Estimate how often a client can point at the largest true output.
    Argmax {
        #[arg(long, default_value_t = 10)]
        outputs: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// `masked-argmax` or `group-hypothesis`.
        #[arg(long, value_parser = parse_strategy, default_value = "masked-argmax")]
        strategy: GuessStrategy,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Lower bound of the activation-sum range.
        #[arg(long)]
        act_sum_min: Option<f64>,
        /// Upper bound of the activation-sum range.
        #[arg(long)]
        act_sum_max: Option<f64>,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Path to the JSON run configuration (shared with every client).
    #[arg(long)]
    config: PathBuf,
    /// Listen address; overrides the config's transport address.
    #[arg(long)]
    addr: Option<String>,
}

#[derive(Args)]
struct JoinArgs {
    /// Path to the JSON run configuration (shared with the server).
    #[arg(long)]
    config: PathBuf,
    /// Which roster entry this process plays.
    #[arg(long)]
    client_id: u64,
    /// Server address; overrides the config's transport address.
    #[arg(long)]
    addr: Option<String>,
}

fn parse_mode(s: &str) -> std::result::Result<RoundMode, String> {
    match s {
        "plain" => Ok(RoundMode::Plain),
        "masked" => Ok(RoundMode::Masked),
        other => Err(format!("unknown mode `{other}` (expected `plain` or `masked`)")),
    }
}

fn parse_strategy(s: &str) -> std::result::Result<GuessStrategy, String> {
    match s {
        "masked-argmax" | "masked_argmax" => Ok(GuessStrategy::MaskedArgmax),
        "group-hypothesis" | "group_hypothesis" => Ok(GuessStrategy::GroupHypothesis),
        other => Err(format!(
            "unknown strategy `{other}` (expected `masked-argmax` or `group-hypothesis`)"
        )),
    }
}

/// Parse the process arguments, run the chosen command, and map the outcome
/// to a process exit code.
pub fn main_entry() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => match cli.run() {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 5,
            };
            let _ = e.print();
            code
        }
    }
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Train(args) => train(args),
            Command::Verify(args) => verify(args),
            Command::Attack { probe } => attack(probe),
            Command::Serve(args) => serve(args),
            Command::Join(args) => join(args),
        }
    }
}

// ---------------------------------------------------------------------------
// train

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(clients) = args.clients {
        cfg.clients = clients;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(groups) = args.partition_groups {
        cfg.partition_groups = Some(groups);
    }
    if let Some(path) = args.metrics_csv {
        cfg.metrics_csv = Some(path);
    }
    if let Some(path) = args.manifest {
        cfg.manifest = Some(path);
    }
    cfg.validate()?;
    if !matches!(cfg.transport, TransportConfig::InProcess) {
        return Err(Error::Usage(
            "train drives an in-process run; use `serve` and `join` for the tcp transport".into(),
        ));
    }
    let outcome = run_in_process(&cfg)?;
    report_outcome(&cfg, &outcome)?;
    if args.check_against_plain {
        if cfg.mode != RoundMode::Masked {
            return Err(Error::Usage(
                "--check-against-plain compares a masked run against plain; set mode=masked".into(),
            ));
        }
        let mut plain_cfg = cfg.clone();
        plain_cfg.mode = RoundMode::Plain;
        let plain = run_in_process(&plain_cfg)?;
        let worst_grad = outcome
            .round_gradients
            .iter()
            .zip(&plain.round_gradients)
            .map(|(a, b)| grad_set_rel_err(a, b))
            .fold(0.0, f64::max);
        let worst_loss = outcome
            .records
            .iter()
            .zip(&plain.records)
            .map(|(a, b)| rel_err_scalar(a.train_loss, b.train_loss))
            .fold(0.0, f64::max);
        let param_err = params_rel_err(&outcome.params, &plain.params);
        println!(
            "plain-path check: gradients {worst_grad:.3e}, losses {worst_loss:.3e}, \
             final weights {param_err:.3e}"
        );
        if worst_grad > GRAD_TOL || worst_loss > LOSS_TOL || param_err > PARAM_TOL {
            return Err(Error::Verification(format!(
                "masked run diverged from the plain run (gradients {worst_grad:.3e}, \
                 losses {worst_loss:.3e}, final weights {param_err:.3e})"
            )));
        }
        println!("masked run matches the plain run within tolerance");
    }
    Ok(())
}

/// Drive one full run through the in-process transport so every broadcast
/// and update crosses the wire codec.
fn run_in_process(cfg: &RunConfig) -> Result<crate::server::RunOutcome> {
    let prepared = cfg.prepare()?;
    let opts = cfg.train_options()?;
    let mut transport = InProcTransport::new(prepared.clients)?;
    run_server_rounds(&prepared.initial, &opts, &mut transport)
}

/// Print the run summary and write whichever artifacts the config asks for.
fn report_outcome(cfg: &RunConfig, outcome: &crate::server::RunOutcome) -> Result<()> {
    println!(
        "{} run: {} rounds, {} clients, layer widths {:?}",
        cfg.mode.as_str(),
        outcome.records.len(),
        cfg.clients,
        cfg.dims
    );
    if let Some(last) = outcome.records.last() {
        println!("final train loss {:.6e}", last.train_loss);
    }
    println!("final weights sha256 {}", param_hash_exact(&outcome.params));
    if let Some(path) = &cfg.metrics_csv {
        write_metrics_csv(path, &outcome.records)?;
        println!("metrics written to {}", path.display());
    }
    if let Some(path) = &cfg.manifest {
        let manifest = RunManifest::new(cfg, &outcome.records, &outcome.params);
        write_manifest(path, &manifest)?;
        println!("manifest written to {}", path.display());
    }
    Ok(())
}

fn grad_set_rel_err(a: &GradientSet, b: &GradientSet) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| rel_err_matrices(x, y))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// verify

/// One battery entry: a name, a verdict, and the numbers behind it.
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    fn tolerance(name: &str, worst: f64, tol: f64) -> CheckLine {
        CheckLine {
            name: name.into(),
            pass: worst <= tol,
            detail: format!("max rel err {worst:.3e} (tolerance {tol:.0e})"),
        }
    }

    /// The `[PASS] name: detail` form every front end prints.
    pub fn render(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        format!("[{verdict}] {}: {}", self.name, self.detail)
    }
}

/// Run the full verification battery and return one line per check.
///
/// `inject_swapped_corrections` deliberately mis-orders the per-group
/// correction terms in every client upload; with two or more coefficient
/// groups the recovery checks must then fail, which proves the battery has
/// teeth.
pub fn run_battery(seed: u64, trials: u64, inject_swapped_corrections: bool) -> Result<Vec<CheckLine>> {
    let swap = inject_swapped_corrections;
    let mut lines = Vec::new();
    let (hidden, output) = check_forward_relations(seed)?;
    lines.push(hidden);
    lines.push(output);
    lines.push(check_gradient_identity(seed.wrapping_add(1), swap)?);
    lines.push(check_masked_fd(seed.wrapping_add(2))?);
    lines.push(check_training_equivalence(seed.wrapping_add(3), swap)?);
    lines.push(check_ambiguity(seed.wrapping_add(4))?);
    lines.push(check_grad_ambiguity(seed.wrapping_add(5))?);
    lines.push(check_argmax(seed.wrapping_add(6), trials, GuessStrategy::MaskedArgmax)?);
    lines.push(check_argmax(seed.wrapping_add(7), trials, GuessStrategy::GroupHypothesis)?);
    lines.push(check_determinism(seed.wrapping_add(8))?);
    Ok(lines)
}

fn verify(args: VerifyArgs) -> Result<()> {
    let lines = run_battery(args.seed, args.trials, args.inject_swapped_corrections)?;
    for line in &lines {
        println!("{}", line.render());
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("verification: {}/{} checks passed", lines.len() - failed, lines.len());
    if failed > 0 {
        Err(Error::Verification(format!(
            "{failed} of {} checks failed",
            lines.len()
        )))
    } else {
        Ok(())
    }
}

/// Fresh random weights, a fresh secret, and a masked copy, in the same
/// small-weight regime the library's own unit tests pin down.
fn masked_instance(
    dims: &[usize],
    groups: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(MlpParams, crate::perturb::RoundSecret, crate::perturb::MaskedModel)> {
    let dims = LayerDims::new(dims.to_vec())?;
    let params = MlpParams::init_normal(dims.clone(), rng);
    let secret = sample_secret(&dims, groups, &NoiseConfig::default(), rng)?;
    let masked = mask_model(&params, &secret)?;
    Ok((params, secret, masked))
}

fn random_shard(dims: &LayerDims, len: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..len)
        .map(|_| Sample {
            features: Vector::from_fn(dims.input_width(), |_| rng.gen_range(-1.0..1.0)),
            target: Vector::from_fn(dims.output_width(), |_| rng.gen_range(-1.0..1.0)),
        })
        .collect()
}

/// Hidden activations of the masked net must be the plain ones rescaled;
/// the masked output must be the plain output shifted by `act_sum` times
/// the offset vector.
fn check_forward_relations(seed: u64) -> Result<(CheckLine, CheckLine)> {
    let pool: [&[usize]; 4] = [&[3, 6, 2], &[4, 7, 5, 3], &[5, 9, 4], &[2, 5, 5, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_hidden = 0.0f64;
    let mut worst_output = 0.0f64;
    for i in 0..100 {
        let dims_slice = pool[i % pool.len()];
        let n_out = *dims_slice.last().expect("non-empty dims");
        let groups = 1 + i % n_out;
        let (params, secret, masked) = masked_instance(dims_slice, groups, &mut rng)?;
        let x = Vector::from_fn(params.dims().input_width(), |_| rng.gen_range(-1.0..1.0));
        let plain = forward_plain(&params, &x)?;
        let masked_acts = forward_masked(&masked, &x)?;
        for l in 1..params.dims().depth() {
            let scaled = plain.layer(l).hadamard(secret.hidden_scale(l))?;
            worst_hidden = worst_hidden.max(rel_err_vectors(masked_acts.layer(l), &scaled));
        }
        let shifted = plain
            .output()
            .add(&secret.offset().scale(masked_acts.act_sum()))?;
        worst_output = worst_output.max(rel_err_vectors(masked_acts.output(), &shifted));
    }
    Ok((
        CheckLine::tolerance("masked-forward-hidden-scaling", worst_hidden, 1e-10),
        CheckLine::tolerance("masked-forward-output-offset", worst_output, 1e-9),
    ))
}

/// The gradient recovered from a masked upload must equal the plain local
/// gradient of the same shard.
fn check_gradient_identity(seed: u64, swap: bool) -> Result<CheckLine> {
    let pool: [&[usize]; 3] = [&[3, 6, 4, 2], &[4, 8, 3], &[5, 7, 6, 3]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let dims_slice = pool[i % pool.len()];
        let n_out = *dims_slice.last().expect("non-empty dims");
        // Two or more groups, so deliberately mis-ordered corrections are
        // never a silent no-op.
        let groups = 2 + i % (n_out - 1);
        let (params, secret, masked) = masked_instance(dims_slice, groups, &mut rng)?;
        let shard = random_shard(params.dims(), 4, &mut rng);
        let (plain_grad, _) = local_gradient_plain(&params, &shard)?;
        let update = if swap {
            local_update_with_swapped_groups(&masked, 0, 0, &shard)?
        } else {
            local_update(&masked, 0, 0, &shard)?
        };
        let agg = MaskedAggregate {
            grad: update.grad,
            group_corrections: update.group_corrections,
            sum_corrections: update.sum_corrections,
        };
        let recovered = recover_gradient(&secret, &agg)?;
        worst = worst.max(grad_set_rel_err(&recovered, &plain_grad));
    }
    Ok(CheckLine::tolerance("gradient-recovery-identity", worst, GRAD_TOL))
}

/// The masked backward pass must match central finite differences of the
/// masked loss, away from activation kinks.
fn check_masked_fd(seed: u64) -> Result<CheckLine> {
    use crate::client::backward_masked;
    let pool: [&[usize]; 2] = [&[3, 5, 2], &[4, 6, 3]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..10 {
        let dims_slice = pool[i % pool.len()];
        let (_, _, masked) = masked_instance(dims_slice, 2, &mut rng)?;
        let as_plain = MlpParams::from_weights(masked.dims.clone(), masked.layers.clone())?;
        let x = Vector::from_fn(masked.dims.input_width(), |_| rng.gen_range(-1.0..1.0));
        let target = Vector::from_fn(masked.dims.output_width(), |_| rng.gen_range(-1.0..1.0));
        let acts = forward_masked(&masked, &x)?;
        let analytic = backward_masked(&masked, &acts, &x, &target)?;
        let report = central_diff_check(
            |p| {
                let a = forward_plain(p, &x)?;
                loss_mse(a.output(), &target)
            },
            |p| {
                let a = forward_plain(p, &x)?;
                Ok((1..p.dims().depth())
                    .flat_map(|l| {
                        a.layer(l).as_slice().iter().map(|&v| v > 0.0).collect::<Vec<_>>()
                    })
                    .collect())
            },
            &as_plain,
            &analytic,
            1e-4,
        )?;
        worst = worst.max(report.max_rel_err);
        checked += report.checked;
    }
    let mut line = CheckLine::tolerance("masked-gradient-finite-difference", worst, 1e-6);
    if checked == 0 {
        line.pass = false;
        line.detail = "every coordinate landed on an activation kink".into();
    }
    Ok(line)
}

/// A short masked run and a plain run of the same configuration must agree
/// on every recovered gradient, every recovered loss, and the final weights.
fn check_training_equivalence(seed: u64, swap: bool) -> Result<CheckLine> {
    let dims = LayerDims::new(vec![5, 8, 4, 3])?;
    let rounds = 10u64;
    let groups = 2usize;
    let lr = 0.05f64;
    let noise = NoiseConfig::default();
    let mut data = data_rng(seed);
    let clients: Vec<LocalClient> = (0..3)
        .map(|c| {
            let shard = random_shard(&dims, 8, &mut data);
            LocalClient::new(c, shard, BatchPolicy::Full, seed)
        })
        .collect();
    let initial = MlpParams::init_normal(dims, &mut init_rng(seed));
    let ids: Vec<u64> = clients.iter().map(|c| c.id).collect();

    let plain = crate::server::run_training(
        &initial,
        &clients,
        &TrainOptions {
            mode: RoundMode::Plain,
            rounds,
            learning_rate: lr,
            noise: noise.clone(),
            partition_groups: groups,
            run_seed: seed,
        },
    )?;

    let mut params = initial.clone();
    let mut worst_grad = 0.0f64;
    let mut worst_loss = 0.0f64;
    for round in 0..rounds {
        let mut rng = mask_rng(seed, round);
        let mut state = MaskedRoundState::begin(round, &params, &noise, groups, &ids, &mut rng)?;
        for client in &clients {
            let update = if swap {
                client.update_masked_swapped(round, state.masked_model())?
            } else {
                client.update_masked(round, state.masked_model())?
            };
            state.accept(update)?;
        }
        let recovered = state.recover()?;
        worst_grad = worst_grad
            .max(grad_set_rel_err(&recovered.grad, &plain.round_gradients[round as usize]));
        worst_loss = worst_loss.max(rel_err_scalar(
            recovered.train_loss,
            plain.records[round as usize].train_loss,
        ));
        let (next, _) =
            fedavg_step(&params, &[(recovered.grad, recovered.total_samples as usize)], lr)?;
        params = next;
    }
    let param_err = params_rel_err(&params, &plain.params);
    let pass = worst_grad <= GRAD_TOL && worst_loss <= LOSS_TOL && param_err <= PARAM_TOL;
    Ok(CheckLine {
        name: "training-equivalence".into(),
        pass,
        detail: format!(
            "gradients {worst_grad:.3e} (tolerance {GRAD_TOL:.0e}), \
             losses {worst_loss:.3e} (tolerance {LOSS_TOL:.0e}), \
             final weights {param_err:.3e} (tolerance {PARAM_TOL:.0e})"
        ),
    })
}

/// Every broadcast must admit alternative weights that reproduce it exactly
/// while sitting far from the true weights.
fn check_ambiguity(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = ambiguity_batch(&[4, 8, 3], 2, 100, &NoiseConfig::default(), &mut rng)?;
    let pass = report.max_reproduction_rel_err <= 1e-12 && report.min_distance_from_truth > 1e-6;
    Ok(CheckLine {
        name: "broadcast-ambiguity-witness".into(),
        pass,
        detail: format!(
            "reproduction {:.3e} (tolerance 1e-12), distance from truth {:.3e} (must exceed 1e-6)",
            report.max_reproduction_rel_err, report.min_distance_from_truth
        ),
    })
}

/// One masked upload must be exactly explainable by many well-separated
/// plain gradients.
fn check_grad_ambiguity(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = gradient_ambiguity_demo(&[4, 7, 3], 3, 8, 6, &NoiseConfig::default(), &mut rng)?;
    let pass = report.max_reproduction_rel_err <= GRAD_TOL && report.min_pairwise_spread > 1e-3;
    Ok(CheckLine {
        name: "upload-gradient-ambiguity".into(),
        pass,
        detail: format!(
            "reproduction {:.3e} (tolerance 1e-9), candidate spread {:.3e} (must exceed 1e-3)",
            report.max_reproduction_rel_err, report.min_pairwise_spread
        ),
    })
}

/// Guessing the true argmax from the masked view must stay within sampling
/// noise of chance for every group count.
fn check_argmax(seed: u64, trials: u64, strategy: GuessStrategy) -> Result<CheckLine> {
    let mut worst_margin = f64::INFINITY;
    let mut worst = None;
    for (i, &groups) in [1usize, 2, 5, 10].iter().enumerate() {
        let cfg = GuessConfig::new(10, groups, trials, strategy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(131).wrapping_add(i as u64));
        let report = argmax_guess_experiment(&cfg, &mut rng)?;
        let margin = report.chance_bound - report.success_rate;
        if margin < worst_margin {
            worst_margin = margin;
            worst = Some((groups, report.success_rate, report.chance_bound));
        }
    }
    let (groups, rate, bound) = worst.expect("at least one group count");
    Ok(CheckLine {
        name: format!("argmax-chance-{}", strategy.as_str().replace('_', "-")),
        pass: worst_margin >= 0.0,
        detail: format!(
            "worst case {groups} groups: success rate {rate:.4} vs chance bound {bound:.4}"
        ),
    })
}

/// Two runs of one configuration must produce byte-identical metrics
/// (timing column aside) and bit-identical final weights.
fn check_determinism(seed: u64) -> Result<CheckLine> {
    let cfg = RunConfig {
        mode: RoundMode::Masked,
        dataset: crate::config::DatasetConfig::SynthClassification {
            n_samples: 60,
            n_features: 6,
            n_classes: 3,
            separation: 2.0,
            cluster_std: 0.6,
        },
        dims: vec![6, 10, 3],
        clients: 3,
        rounds: 6,
        learning_rate: 0.05,
        batch: BatchPolicy::Fixed { size: 8 },
        partition_groups: None,
        noise: NoiseConfig::default(),
        seed,
        split: crate::data::SplitRatios::default(),
        normalization: crate::data::Normalization::None,
        transport: TransportConfig::InProcess,
        metrics_csv: None,
        manifest: None,
    };
    let run = |cfg: &RunConfig| -> Result<(String, String)> {
        let outcome = run_in_process(cfg)?;
        Ok((
            strip_wall_ms(&metrics_csv_string(&outcome.records)),
            param_hash_exact(&outcome.params),
        ))
    };
    let (csv_a, hash_a) = run(&cfg)?;
    let (csv_b, hash_b) = run(&cfg)?;
    let pass = csv_a == csv_b && hash_a == hash_b;
    Ok(CheckLine {
        name: "run-determinism".into(),
        pass,
        detail: if pass {
            "metrics and final weights identical across repeated runs".into()
        } else {
            "repeated runs diverged".into()
        },
    })
}

// ---------------------------------------------------------------------------
// attack

fn attack(probe: AttackCmd) -> Result<()> {
    match probe {
        AttackCmd::Ambiguity { dims, groups, instances, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report =
                ambiguity_batch(&dims, groups, instances, &NoiseConfig::default(), &mut rng)?;
            print_json(&report)
        }
        AttackCmd::GradAmbiguity { dims, groups, candidates, shard_size, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = gradient_ambiguity_demo(
                &dims,
                groups,
                candidates,
                shard_size,
                &NoiseConfig::default(),
                &mut rng,
            )?;
            print_json(&report)
        }
        AttackCmd::Argmax {
            outputs,
            groups,
            trials,
            strategy,
            seed,
            act_sum_min,
            act_sum_max,
        } => {
            let mut cfg = GuessConfig::new(outputs, groups, trials, strategy);
            if let Some(v) = act_sum_min {
                cfg.act_sum_min = v;
            }
            if let Some(v) = act_sum_max {
                cfg.act_sum_max = v;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = argmax_guess_experiment(&cfg, &mut rng)?;
            print_json(&report)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Usage(format!("report serialization: {e}")))?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// serve / join

/// Resolve the connect/listen address and timeouts from config plus
/// command-line override.
fn tcp_settings(cfg: &RunConfig, addr_override: Option<String>) -> Result<(String, TcpConfig)> {
    match &cfg.transport {
        TransportConfig::Tcp { addr, handshake_timeout_ms, round_timeout_ms } => Ok((
            addr_override.unwrap_or_else(|| addr.clone()),
            TcpConfig {
                handshake_timeout: Duration::from_millis(*handshake_timeout_ms),
                round_timeout: Duration::from_millis(*round_timeout_ms),
            },
        )),
        TransportConfig::InProcess => match addr_override {
            Some(addr) => Ok((addr, TcpConfig::default())),
            None => Err(Error::Usage(
                "a tcp endpoint needs transport.kind = \"tcp\" in the config or an --addr flag"
                    .into(),
            )),
        },
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (addr, tcp_cfg) = tcp_settings(&cfg, args.addr)?;
    let prepared = cfg.prepare()?;
    let opts = cfg.train_options()?;
    let listener = TcpListener::bind(&addr)?;
    println!(
        "listening on {}, waiting for {} clients",
        listener.local_addr()?,
        cfg.clients
    );
    let mut transport = accept_clients(&listener, cfg.clients, &tcp_cfg)?;
    log::info!("roster complete, starting {} rounds", cfg.rounds);
    let outcome = run_server_rounds(&prepared.initial, &opts, &mut transport)?;
    report_outcome(&cfg, &outcome)
}

fn join(args: JoinArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (addr, tcp_cfg) = tcp_settings(&cfg, args.addr)?;
    let prepared = cfg.prepare()?;
    let client = prepared
        .clients
        .into_iter()
        .find(|c| c.id == args.client_id)
        .ok_or_else(|| {
            Error::Usage(format!(
                "client id {} outside the roster 0..{}",
                args.client_id, cfg.clients
            ))
        })?;
    // The server may still be binding; retry until the handshake budget runs
    // out so start order does not matter.
    let deadline = Instant::now() + tcp_cfg.handshake_timeout;
    let mut stream = loop {
        match TcpStream::connect(&addr) {
            Ok(s) => break s,
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "no server reachable at {addr} within {:?}: {e}",
                        tcp_cfg.handshake_timeout
                    )));
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    };
    stream.set_nodelay(true)?;
    log::info!("client {} connected to {addr}", client.id);
    let rounds = run_client(&mut stream, &client)?;
    println!("client {} served {rounds} rounds", client.id);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_and_strategy_parsers_accept_documented_spellings() {
        assert_eq!(parse_mode("plain").unwrap(), RoundMode::Plain);
        assert_eq!(parse_mode("masked").unwrap(), RoundMode::Masked);
        assert!(parse_mode("both").is_err());
        assert_eq!(
            parse_strategy("masked-argmax").unwrap(),
            GuessStrategy::MaskedArgmax
        );
        assert_eq!(
            parse_strategy("group_hypothesis").unwrap(),
            GuessStrategy::GroupHypothesis
        );
        assert!(parse_strategy("oracle").is_err());
    }

    #[test]
    fn battery_passes_on_defaults_and_fails_under_swapped_corrections() {
        let honest = check_gradient_identity(99, false).unwrap();
        assert!(honest.pass, "{}", honest.detail);
        let swapped = check_gradient_identity(99, true).unwrap();
        assert!(!swapped.pass, "{}", swapped.detail);
        let honest_run = check_training_equivalence(99, false).unwrap();
        assert!(honest_run.pass, "{}", honest_run.detail);
        let swapped_run = check_training_equivalence(99, true).unwrap();
        assert!(!swapped_run.pass, "{}", swapped_run.detail);
    }

    #[test]
    fn forward_relation_checks_hold() {
        let (hidden, output) = check_forward_relations(5).unwrap();
        assert!(hidden.pass, "{}", hidden.detail);
        assert!(output.pass, "{}", output.detail);
    }

    #[test]
    fn determinism_check_holds() {
        let line = check_determinism(11).unwrap();
        assert!(line.pass, "{}", line.detail);
    }
}
