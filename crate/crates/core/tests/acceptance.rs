//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Contract criteria (exact properties of the implementation) fail the
//! process. Statistical criteria are performance targets and are reported
//! without failing it. They run at the full budget (8 seeds, 50 epochs) when
//! `GENTLE_ACCEPT_FULL=1` and otherwise at a reduced budget that is named on
//! each line.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gentle::datagen::Quality;
use gentle::dynmodel::{split_sizes, EarlyStopper, EnsembleModel, ModelTrainConfig};
use gentle::envsuite::{env_step, Family};
use gentle::evalkit::{mean_std, Protocol};
use gentle::numkit::{check_gradient, mse_loss, Activation, Matrix, Mlp, Rng};
use gentle::offpolicy::{compute_lambda, ActorCritic, RlBatch, RlConfig, LAMBDA_FLOOR};
use gentle::pipeline::{
    self, ContextSource, DiagSettings, EvalSettings, GenDataConfig, LoadedRun, PretrainConfig, TrainPaths,
};
use gentle::relabel::{augment, AugmentConfig, Policy, SourceKind};
use gentle::tae::{ContextBatch, Latent, TaePair, TaeShape};
use gentle::trainer::{TrainConfig, Variant};

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const GRAD_NETS: u64 = 3;
const GRAD_BUDGET_SECS: f64 = 30.0;
const PERM_CONTEXTS: usize = 100;
const PERM_PER_CONTEXT: usize = 10;
const PERM_BUDGET_SECS: f64 = 5.0;
const KNN_TRAIN_MIN: f64 = 0.9;
const KNN_TEST_MIN: f64 = 0.7;
const KNN_RANDOM_MAX: f64 = 0.3;
const ONE_SHOT_FRACTION: f64 = 0.6;
const FULL_SEEDS: u64 = 8;
const FULL_EPOCHS: usize = 50;
const REDUCED_SEEDS: u64 = 2;
const REDUCED_EPOCHS: usize = 5;
const REDUCED_MODEL_EPOCHS: usize = 20;
const EVAL_EPISODES: usize = 10;
const CONTEXT_SIZE: usize = 256;
const RESAMPLES: usize = 10;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    contract: bool,
    detail: String,
}

impl Line {
    fn print(&self) {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{}] {}: {}", self.id, self.name, self.detail);
    }
}

fn contract(id: usize, name: &'static str, outcome: Result<String, String>) -> Line {
    let (pass, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Line {
        id,
        name,
        pass,
        contract: true,
        detail,
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn random_context(rng: &mut Rng, n: usize, x_dim: usize, y_dim: usize) -> ContextBatch {
    let x = random_matrix(rng, n, x_dim, 1.0);
    let y = random_matrix(rng, n, y_dim, 1.0);
    ContextBatch::new(x, y).unwrap()
}

fn small_tae(seed: u64) -> TaePair {
    let shape = TaeShape {
        x_dim: 4,
        y_dim: 3,
        latent_dim: 5,
        hidden_width: 12,
        hidden_layers: 2,
    };
    TaePair::new(shape, &mut Rng::new(seed))
}

fn small_rl_cfg() -> RlConfig {
    RlConfig {
        hidden_width: 12,
        hidden_layers: 3,
        ..RlConfig::default()
    }
}

fn rl_batch(rng: &mut Rng, n: usize, bound: f64) -> RlBatch {
    RlBatch {
        s: random_matrix(rng, n, 2, 1.0),
        a: random_matrix(rng, n, 2, 0.5 * bound),
        s_next: random_matrix(rng, n, 2, 1.0),
        r: (0..n).map(|_| rng.normal()).collect(),
        z: Latent((0..5).map(|_| rng.uniform_range(-0.9, 0.9)).collect()),
    }
}

/// Actor objective evaluated row by row with λ held fixed.
fn fixed_lambda_actor_loss(ac: &ActorCritic, batches: &[RlBatch], lambdas: &[f64]) -> f64 {
    let bound = ac.action_bound;
    let mut total = 0.0;
    for (b, lam) in batches.iter().zip(lambdas) {
        let mut sum = 0.0;
        for k in 0..b.len() {
            let pi: Vec<f64> = ac.act(b.s.row(k), &b.z).unwrap().iter().map(|v| v / bound).collect();
            let input: Vec<f64> = b.s.row(k).iter().chain(b.z.as_slice()).chain(&pi).copied().collect();
            let q = ac.critic1.forward(&input).unwrap()[0];
            let bc: f64 = pi.iter().zip(b.a.row(k)).map(|(p, a)| (p - a / bound).powi(2)).sum();
            sum += -lam * q + bc;
        }
        total += sum / b.len() as f64;
    }
    total / batches.len() as f64
}

fn gradient_suite() -> Result<String, String> {
    let started = Instant::now();
    let mut worst = [0.0f64; 5];
    for seed in 0..GRAD_NETS {
        let mut rng = Rng::new(100 + seed);

        let tae = small_tae(seed);
        let contexts: Vec<ContextBatch> = (0..3).map(|i| random_context(&mut rng, 4 + i, 4, 3)).collect();
        let refs: Vec<&ContextBatch> = contexts.iter().collect();
        let g = tae.reconstruction_gradients(&refs).map_err(|e| e.to_string())?;
        let enc = check_gradient(
            |p| {
                let mut t = tae.clone();
                t.encoder.params_mut().copy_from_slice(p);
                t.reconstruction_gradients(&refs).unwrap().loss
            },
            tae.encoder.params(),
            &g.encoder,
            GRAD_STEP,
        );
        let dec = check_gradient(
            |p| {
                let mut t = tae.clone();
                t.decoder.params_mut().copy_from_slice(p);
                t.reconstruction_gradients(&refs).unwrap().loss
            },
            tae.decoder.params(),
            &g.decoder,
            GRAD_STEP,
        );
        worst[0] = worst[0].max(enc.max_rel_error).max(dec.max_rel_error);

        let groups: Vec<Vec<&ContextBatch>> = vec![vec![refs[0], refs[1]], vec![refs[2], refs[1]], vec![refs[0], refs[2]]];
        let g = tae.contrastive_gradients(&groups).map_err(|e| e.to_string())?;
        let con = check_gradient(
            |p| {
                let mut t = tae.clone();
                t.encoder.params_mut().copy_from_slice(p);
                t.contrastive_gradients(&groups).unwrap().loss
            },
            tae.encoder.params(),
            &g.encoder,
            GRAD_STEP,
        );
        worst[1] = worst[1].max(con.max_rel_error);

        let ac = ActorCritic::new(2, 2, 5, 0.7, &small_rl_cfg(), &mut Rng::new(200 + seed));
        let batches = vec![rl_batch(&mut rng, 6, 0.7), rl_batch(&mut rng, 4, 0.7)];
        let g = ac.actor_gradients(&batches, 2.5);
        let lambdas = g.lambdas.clone();
        let at = |p: &[f64]| {
            let mut q = ac.clone();
            q.actor.params_mut().copy_from_slice(p);
            fixed_lambda_actor_loss(&q, &batches, &lambdas)
        };
        ensure((at(ac.actor.params()) - g.loss).abs() < 1e-12, "actor loss disagrees with the row-wise oracle")?;
        worst[2] = worst[2].max(check_gradient(at, ac.actor.params(), &g.actor, GRAD_STEP).max_rel_error);

        let targets: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let g = ac.critic_gradients(&batches, &targets);
        let c1 = check_gradient(
            |p| {
                let mut q = ac.clone();
                q.critic1.params_mut().copy_from_slice(p);
                q.critic_gradients(&batches, &targets).loss
            },
            ac.critic1.params(),
            &g.critic1,
            GRAD_STEP,
        );
        let c2 = check_gradient(
            |p| {
                let mut q = ac.clone();
                q.critic2.params_mut().copy_from_slice(p);
                q.critic_gradients(&batches, &targets).loss
            },
            ac.critic2.params(),
            &g.critic2,
            GRAD_STEP,
        );
        worst[3] = worst[3].max(c1.max_rel_error).max(c2.max_rel_error);

        let net = Mlp::new(&[4, 16, 16, 3], Activation::Relu, Activation::Identity, &mut Rng::new(300 + seed));
        let x = random_matrix(&mut rng, 8, 4, 1.0);
        let y = random_matrix(&mut rng, 8, 3, 1.0);
        let (_, grads) = net.gradient(&x, |out| mse_loss(out, &y)).map_err(|e| e.to_string())?;
        let reg = check_gradient(
            |p| {
                let mut n = net.clone();
                n.params_mut().copy_from_slice(p);
                mse_loss(&n.forward_batch(&x).unwrap(), &y).0
            },
            net.params(),
            &grads,
            GRAD_STEP,
        );
        worst[4] = worst[4].max(reg.max_rel_error);
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "{GRAD_NETS} nets each; max rel err reconstruction {:.1e}, contrastive {:.1e}, actor {:.1e}, critic {:.1e}, model {:.1e} (tol {GRAD_TOL:.0e}); {secs:.1}s",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    ensure(worst.iter().all(|&w| w < GRAD_TOL) && secs < GRAD_BUDGET_SECS, detail.clone())?;
    Ok(detail)
}

fn permutation_invariance() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = Rng::new(7);
    let tae = small_tae(11);
    for c in 0..PERM_CONTEXTS {
        let n = 1 + rng.below(64);
        let ctx = random_context(&mut rng, n, 4, 3);
        let z = tae.encode(&ctx).map_err(|e| e.to_string())?;
        for _ in 0..PERM_PER_CONTEXT {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let zp = tae.encode(&ctx.permuted(&perm)).map_err(|e| e.to_string())?;
            let same = z.0.iter().zip(&zp.0).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, format!("context {c} (size {n}) changed under permutation"))?;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("{PERM_CONTEXTS} contexts x {PERM_PER_CONTEXT} permutations bit-identical; {secs:.2}s");
    ensure(secs < PERM_BUDGET_SECS, detail.clone())?;
    Ok(detail)
}

fn lambda_rule() -> Result<String, String> {
    let lam = compute_lambda(&[1.0, -3.0, 2.0], 2.5);
    ensure(lam == 1.25, format!("compute_lambda([1,-3,2], 2.5) = {lam}"))?;
    let guard = compute_lambda(&[0.0, 0.0, 0.0], 2.5);
    ensure(guard == 2.5 / LAMBDA_FLOOR, format!("all-zero Q gives {guard}"))?;
    Ok(format!("lambda = {lam}; all-zero Q gives {guard:e} = 2.5 / {LAMBDA_FLOOR:e}"))
}

fn algorithm1_contract() -> Result<String, String> {
    let family = Family::PointRobot;
    let coll = gentle::datagen::DatasetCollection::generate(family, Quality::Expert, 10, 0, 5, 3).map_err(|e| e.to_string())?;
    let datasets = &coll.train;
    let ac = ActorCritic::new(2, 2, 5, family.config().action_bound, &small_rl_cfg(), &mut Rng::new(5));
    let mut zrng = Rng::new(9);
    let zs: Vec<Latent> = (0..10).map(|_| Latent((0..5).map(|_| zrng.uniform_range(-0.9, 0.9)).collect())).collect();
    let cfg = AugmentConfig {
        k1: 64,
        k2: 192,
        oracle_model: true,
        ..AugmentConfig::balanced()
    };
    let buffers = augment(datasets, &[], &ac, &zs, &cfg, 17).map_err(|e| e.to_string())?;
    ensure(buffers.len() == 10, "one buffer per task")?;
    for (i, b) in buffers.iter().enumerate() {
        ensure(b.len() == 256, format!("task {i}: {} entries", b.len()))?;
        ensure(b.ego_count() == 64, format!("task {i}: {} ego entries", b.ego_count()))?;
        let states = Matrix::from_rows(&b.transitions.iter().map(|t| t.s.clone()).collect::<Vec<_>>()).unwrap();
        let actions = ac.act_batch(&states, &zs[i]);
        for (k, (t, p)) in b.transitions.iter().zip(&b.provenance).enumerate() {
            let src = &datasets[p.source_task].transitions[p.source_index];
            ensure(src.s == t.s, format!("task {i} entry {k}: state differs from its source"))?;
            let ego = p.kind == SourceKind::Ego;
            ensure(ego == (k < 64) && ego == (p.source_task == i), format!("task {i} entry {k}: provenance kind"))?;
            ensure(t.a == actions.row(k), format!("task {i} entry {k}: action is not pi(s, z_i)"))?;
            let (s_next, r) = env_step(&datasets[i].spec, &t.s, &t.a).map_err(|e| e.to_string())?;
            ensure(t.s_next == s_next && t.r == r, format!("task {i} entry {k}: label is not M_i(s, a)"))?;
        }
    }
    Ok("10 buffers of 256 with 64 ego; every action = pi(s, z_i); states, kinds and labels match provenance".into())
}

fn ensemble_recipe(scratch: &Path) -> Result<String, String> {
    for (n, train, hold) in [(2000, 1600, 400), (1000, 800, 200), (5, 4, 1)] {
        let got = split_sizes(n, 0.2);
        ensure(got == (train, hold), format!("split_sizes({n}, 0.2) = {got:?}"))?;
    }
    let mut stopper = EarlyStopper::new(5);
    stopper.observe(1.0);
    for epoch in 1..=5 {
        let (improved, stop) = stopper.observe(1.0);
        ensure(!improved && stop == (epoch == 5), format!("plateau epoch {epoch}: stop = {stop}"))?;
    }
    let recipe = ModelTrainConfig::for_family(Family::PointRobot);
    ensure(
        recipe.members == 7 && recipe.holdout_fraction == 0.2 && recipe.patience == 5,
        "default recipe is not 7 members, holdout 0.2, patience 5",
    )?;
    let data = pipeline::gen_data(
        &GenDataConfig {
            family: Family::PointRobot,
            quality: Quality::Expert,
            n_train_tasks: 2,
            n_test_tasks: 0,
            n_traj: 20,
            seed: 1,
        },
        scratch,
    )
    .map_err(|e| e.to_string())?;
    let model = ModelTrainConfig {
        max_epochs: 3,
        batch_size: 64,
        ..recipe
    };
    let out = scratch.join("models");
    let fitted = pipeline::pretrain(&data, &PretrainConfig { model, seed: 1 }, &out).map_err(|e| e.to_string())?;
    for m in &fitted {
        let loaded = EnsembleModel::load(&gentle::dynmodel::model_dir(&out, m.task_id)).map_err(|e| e.to_string())?;
        ensure(loaded.members.len() == 7, format!("task {}: {} members saved", m.task_id, loaded.members.len()))?;
        ensure(loaded.holdout_size == 80 && loaded.train_size == 320, "saved split sizes")?;
    }
    Ok("splits 1600/400, 800/200, 4/1; stop at the 5th plateau epoch; 7 members in each saved model".into())
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gentle"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("`gentle {}` exited with {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr)),
    )
}

fn pipeline_once(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let data_root = root.join("data");
    run_bin(&[
        "gen-data", "--family", "point-robot", "--n-train-tasks", "3", "--n-test-tasks", "2", "--n-traj", "20", "--seed", "4",
        "--out", &s(&data_root),
    ])?;
    let data = data_root.join("point_robot").join("expert");
    let model_cfg = root.join("model.json");
    let model = ModelTrainConfig {
        max_epochs: 3,
        batch_size: 64,
        ..ModelTrainConfig::for_family(Family::PointRobot)
    };
    std::fs::write(&model_cfg, serde_json::to_string(&model).unwrap()).map_err(|e| e.to_string())?;
    let models = root.join("models");
    run_bin(&["pretrain", "--data", &s(&data), "--config", &s(&model_cfg), "--seed", "4", "--out", &s(&models)])?;
    let run = root.join("run");
    run_bin(&[
        "train", "--data", &s(&data), "--models", &s(&models), "--seed", "4", "--quiet", "--out", &s(&run),
        "--set", "n_train_tasks=3", "--set", "epochs=2", "--set", "steps_per_epoch=10", "--set", "k1=16", "--set", "k2=32",
        "--set", "eval_every=1", "--set", "rep_resamples=2",
    ])?;
    let eval = root.join("eval");
    run_bin(&["eval", "--run", &s(&run), "--data", &s(&data), "--episodes", "2", "--seed", "4", "--out", &s(&eval)])?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&run.join(pipeline::METRICS_FILE))?, read(&eval.join(pipeline::METRICS_FILE))?))
}

fn end_to_end_determinism(scratch: &Path) -> Result<String, String> {
    let a = pipeline_once(&scratch.join("a"))?;
    let b = pipeline_once(&scratch.join("b"))?;
    ensure(!a.0.is_empty() && !a.1.is_empty(), "empty metrics.csv")?;
    ensure(a.0 == b.0, "train metrics.csv differs between runs")?;
    ensure(a.1 == b.1, "eval metrics.csv differs between runs")?;
    Ok(format!(
        "gen-data, pretrain, train, eval via the binary twice; train ({} B) and eval ({} B) metrics.csv byte-identical",
        a.0.len(),
        a.1.len()
    ))
}

/// Per-seed results of the statistical criteria.
#[derive(Default)]
struct SeedResults {
    knn_train: Vec<f64>,
    knn_test: Vec<f64>,
    knn_random: Vec<f64>,
    one_shot_fraction: Vec<f64>,
    pmp_gentle: Vec<f64>,
    pmp_no_relabel: Vec<f64>,
    pmp_oracle: Vec<f64>,
}

struct Budget {
    seeds: u64,
    epochs: usize,
    /// Cap on dynamics-model epochs; `None` keeps the recipe.
    model_epochs: Option<usize>,
    label: String,
}

fn budget() -> Budget {
    let full = std::env::var("GENTLE_ACCEPT_FULL").is_ok_and(|v| v == "1");
    if full {
        Budget {
            seeds: FULL_SEEDS,
            epochs: FULL_EPOCHS,
            model_epochs: None,
            label: format!("full budget: {FULL_SEEDS} seeds x {FULL_EPOCHS} epochs"),
        }
    } else {
        Budget {
            seeds: REDUCED_SEEDS,
            epochs: REDUCED_EPOCHS,
            model_epochs: Some(REDUCED_MODEL_EPOCHS),
            label: format!(
                "reduced budget: {REDUCED_SEEDS} seeds x {REDUCED_EPOCHS} epochs, models capped at {REDUCED_MODEL_EPOCHS} epochs; GENTLE_ACCEPT_FULL=1 runs {FULL_SEEDS} x {FULL_EPOCHS}"
            ),
        }
    }
}

struct Prepared {
    data: std::path::PathBuf,
    models: std::path::PathBuf,
}

fn prepare(family: Family, seed: u64, model_epochs: Option<usize>, root: &Path) -> gentle::error::Result<Prepared> {
    let data = pipeline::gen_data(
        &GenDataConfig {
            family,
            quality: Quality::Expert,
            n_train_tasks: 10,
            n_test_tasks: 10,
            n_traj: 100,
            seed,
        },
        root,
    )?;
    let models = root.join("models").join(family.name());
    let recipe = ModelTrainConfig::for_family(family);
    let model = ModelTrainConfig {
        max_epochs: model_epochs.unwrap_or(recipe.max_epochs),
        ..recipe
    };
    pipeline::pretrain(&data, &PretrainConfig { model, seed }, &models)?;
    Ok(Prepared { data, models })
}

fn train_run(cfg: TrainConfig, prep: &Prepared, out: &Path) -> gentle::error::Result<LoadedRun> {
    let paths = TrainPaths {
        data: prep.data.clone(),
        context_data: None,
        models: Some(prep.models.clone()),
    };
    let art = pipeline::train(&cfg, &paths, out)?;
    Ok(LoadedRun {
        config: cfg,
        tae: art.tae,
        policy: art.policy,
    })
}

fn one_shot(run: &LoadedRun, prep: &Prepared, seed: u64) -> gentle::error::Result<(f64, f64)> {
    let data = pipeline::load_collection(&prep.data)?;
    let settings = EvalSettings {
        protocols: vec![Protocol::OneShot],
        split: gentle::datagen::Split::Test,
        episodes: EVAL_EPISODES,
        context_size: CONTEXT_SIZE,
        seed,
    };
    let outcome = pipeline::evaluate_run(run, &data, &settings)?;
    let mean = outcome.report(Protocol::OneShot).expect("requested").mean;
    Ok((mean, outcome.normalized(Protocol::OneShot).expect("requested")))
}

fn statistical_seed(seed: u64, budget: &Budget, root: &Path, res: &mut SeedResults) -> gentle::error::Result<()> {
    let started = Instant::now();
    let config = |family: Family| TrainConfig {
        epochs: budget.epochs,
        seed,
        ..TrainConfig::desk(family)
    };

    let pr = prepare(Family::PointRobot, seed, budget.model_epochs, root)?;
    let run = train_run(config(Family::PointRobot), &pr, &root.join("pr_gentle"))?;
    let data = pipeline::load_collection(&pr.data)?;
    for split in [gentle::datagen::Split::Train, gentle::datagen::Split::Test] {
        let settings = DiagSettings {
            split,
            source: ContextSource::OneShot,
            resamples: RESAMPLES,
            context_size: CONTEXT_SIZE,
            seed,
        };
        let (diag, _) = pipeline::diagnose_run(&run, &data, &settings)?;
        match split {
            gentle::datagen::Split::Train => res.knn_train.push(diag.knn_accuracy),
            gentle::datagen::Split::Test => {
                res.knn_test.push(diag.knn_accuracy);
                res.knn_random.push(diag.random_init_knn_accuracy);
            }
        }
    }
    res.one_shot_fraction.push(one_shot(&run, &pr, seed)?.1);

    let pmp = prepare(Family::PointMassParams, seed, budget.model_epochs, root)?;
    let gentle_run = train_run(config(Family::PointMassParams), &pmp, &root.join("pmp_gentle"))?;
    res.pmp_gentle.push(one_shot(&gentle_run, &pmp, seed)?.0);
    let no_relabel = TrainConfig {
        variant: Variant::NoRelabel,
        ..config(Family::PointMassParams)
    };
    let run = train_run(no_relabel, &pmp, &root.join("pmp_no_relabel"))?;
    res.pmp_no_relabel.push(one_shot(&run, &pmp, seed)?.0);
    let oracle = TrainConfig {
        oracle_model: true,
        ..config(Family::PointMassParams)
    };
    let run = train_run(oracle, &pmp, &root.join("pmp_oracle"))?;
    res.pmp_oracle.push(one_shot(&run, &pmp, seed)?.0);
    eprintln!("acceptance: seed {seed} done in {:.0}s", started.elapsed().as_secs_f64());
    Ok(())
}

/// Sample standard deviation pooled over two equally sized groups.
fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let var = |v: &[f64]| {
        let (m, _) = mean_std(v);
        if v.len() < 2 {
            0.0
        } else {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        }
    };
    ((var(a) + var(b)) / 2.0).sqrt()
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn statistical(scratch: &Path) -> Vec<Line> {
    let budget = budget();
    let mut res = SeedResults::default();
    let failed = (0..budget.seeds).find_map(|seed| {
        statistical_seed(seed, &budget, &scratch.join(format!("seed_{seed}")), &mut res)
            .err()
            .map(|e| format!("seed {seed}: {e}"))
    });
    let stat = |id, name, pass, detail: String| Line {
        id,
        name,
        pass,
        contract: false,
        detail: format!("{detail} [{}]", budget.label),
    };
    if let Some(err) = failed {
        return [(5, "representation quality"), (6, "one-shot adaptation"), (7, "relabeling matters"), (8, "oracle relabeling")]
            .into_iter()
            .map(|(id, name)| stat(id, name, false, format!("pipeline error: {err}")))
            .collect();
    }
    let mean = |v: &[f64]| mean_std(v).0;
    let (tr, te, rnd) = (mean(&res.knn_train), mean(&res.knn_test), mean(&res.knn_random));
    let (g, n, o) = (mean(&res.pmp_gentle), mean(&res.pmp_no_relabel), mean(&res.pmp_oracle));
    let frac = mean(&res.one_shot_fraction);
    let sd_gn = pooled_std(&res.pmp_gentle, &res.pmp_no_relabel);
    let sd_og = pooled_std(&res.pmp_oracle, &res.pmp_gentle);
    vec![
        stat(
            5,
            "representation quality",
            tr >= KNN_TRAIN_MIN && te >= KNN_TEST_MIN && rnd < KNN_RANDOM_MAX,
            format!(
                "one-shot k-NN train {tr:.3} (>= {KNN_TRAIN_MIN}), test {te:.3} (>= {KNN_TEST_MIN}), random-init encoder {rnd:.3} (< {KNN_RANDOM_MAX})"
            ),
        ),
        stat(
            6,
            "one-shot adaptation",
            frac >= ONE_SHOT_FRACTION,
            format!(
                "PointRobot test one-shot fraction of the random-to-expert gap {frac:.3} (>= {ONE_SHOT_FRACTION}); per seed [{}]",
                fmt_values(&res.one_shot_fraction)
            ),
        ),
        stat(
            7,
            "relabeling matters",
            g - n > sd_gn,
            format!(
                "PointMassParams test one-shot gentle {g:.3} vs no_relabel {n:.3}, gap {:.3} (> pooled std {sd_gn:.3}); gentle [{}], no_relabel [{}]",
                g - n,
                fmt_values(&res.pmp_gentle),
                fmt_values(&res.pmp_no_relabel)
            ),
        ),
        stat(
            8,
            "oracle relabeling",
            o >= g - sd_og,
            format!(
                "PointMassParams test one-shot oracle {o:.3} vs learned {g:.3} (>= learned - pooled std {sd_og:.3}); oracle [{}]",
                fmt_values(&res.pmp_oracle)
            ),
        ),
    ]
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let root = scratch.path();
    let mut lines = vec![
        contract(1, "gradient suite", gradient_suite()),
        contract(2, "encoder permutation invariance", permutation_invariance()),
        contract(3, "lambda rule", lambda_rule()),
        contract(4, "relabeling contract", algorithm1_contract()),
        contract(9, "ensemble recipe", ensemble_recipe(&root.join("ensemble"))),
        contract(10, "end-to-end determinism", end_to_end_determinism(&root.join("e2e"))),
    ];
    for l in &lines {
        l.print();
    }
    let stats = statistical(&root.join("stat"));
    for l in &stats {
        l.print();
    }
    lines.extend(stats);
    lines.sort_by_key(|l| l.id);
    let contract_failures = lines.iter().filter(|l| l.contract && !l.pass).count();
    let stat_failures = lines.iter().filter(|l| !l.contract && !l.pass).count();
    println!(
        "acceptance: {} of {} criteria pass; {contract_failures} contract failures, {stat_failures} statistical failures",
        lines.iter().filter(|l| l.pass).count(),
        lines.len()
    );
    if contract_failures > 0 {
        std::process::exit(1);
    }
}
