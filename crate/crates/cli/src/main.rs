//! `seqrank`: synth → train → eval → rank → plan → gradcheck.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use sha2::{Digest, Sha256};

use seqrank::config::{RunConfig, KEYS};
use seqrank::datasynth::{self, io as corpus_io, World};
use seqrank::evaluation::{compare_losses, evaluate_retrieval, EvalReport, EvalRow, RECALL_KS};
use seqrank::numerics::{checkpoint, GradCheckConfig, ParamStore};
use seqrank::objective::LossKind;
use seqrank::realtime::{self, held_out_events, ranker_auc, LongTermEmbedder, RankRequest};
use seqrank::serving::{evaluate_named_plans, named_plan_of, parse_graph, search_placement, TransferModel};
use seqrank::train::{check_tower_gradients, train_towers};

const METRICS_LOG: &str = "metrics.log";
const RANKER_LOG: &str = "ranker_metrics.log";
const RUN_CONF: &str = "run.conf";
const CHECKPOINT: &str = "checkpoint.dsq";

fn with_run_config(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, default, help)| {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").help(format!("{help} [default: {default}]"));
        if let Some(short) = key.strip_prefix("n_") {
            arg = arg.visible_alias(short);
        }
        if key.contains('_') {
            arg = arg.visible_alias(key.replace('_', "-"));
        }
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    Command::new("seqrank")
        .about("Sequential user modeling: corpus synthesis, two-tower training, real-time ranking, serving plans")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_run_config(Command::new("synth").about("Generate a seeded corpus into --out")))
        .subcommand(with_run_config(
            Command::new("train").about("Train the towers (and ranker) on --corpus; write checkpoint and metrics under --out"),
        ))
        .subcommand(with_run_config(
            Command::new("eval")
                .about("Evaluate --checkpoint on --corpus, or with --compare train every loss over --seeds")
                .arg(Arg::new("compare").long("compare").action(ArgAction::SetTrue).help("run the multi-seed loss comparison")),
        ))
        .subcommand(with_run_config(
            Command::new("rank")
                .about("Score candidate pins for one user")
                .arg(Arg::new("user").long("user").required(true).value_parser(clap::value_parser!(u32)).help("user id in the corpus"))
                .arg(Arg::new("candidates").long("candidates").required(true).value_name("FILE").help("one pin id per line"))
                .arg(
                    Arg::new("time")
                        .long("time")
                        .value_parser(clap::value_parser!(i64))
                        .help("request time (default: corpus horizon end)"),
                ),
        ))
        .subcommand(
            Command::new("plan")
                .about("Serving placement report for an operator graph")
                .arg(Arg::new("graph").long("graph").required(true).value_name("FILE").help("operator graph file"))
                .arg(
                    Arg::new("transfer")
                        .long("transfer")
                        .default_value("overhead=8,bw=1000")
                        .help("overhead=U,bw=B[,coalesce=true|false]"),
                )
                .arg(Arg::new("mode").long("mode").default_value("named").value_parser(["named", "search"]))
                .arg(
                    Arg::new("budget")
                        .long("budget")
                        .default_value("4000000")
                        .value_parser(clap::value_parser!(u64))
                        .help("maximum placements evaluated in search mode"),
                ),
        )
        .subcommand(with_run_config(
            Command::new("gradcheck")
                .about("Finite-difference check of both towers under the dense all-action loss")
                .arg(Arg::new("coords").long("coords").default_value("400").help("coordinates to sample").value_parser(clap::value_parser!(usize))),
        ))
}

/// default → `--config` file → flags.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
        cfg.apply_text(&text).with_context(|| format!("config {path}"))?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("--{key}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    if cfg.checkpoint.is_empty() {
        Path::new(&cfg.out).join(CHECKPOINT)
    } else {
        PathBuf::from(&cfg.checkpoint)
    }
}

/// SHA-256 over the corpus files in a fixed order.
fn corpus_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [corpus_io::META_FILE, corpus_io::PINS_FILE, corpus_io::USERS_FILE, corpus_io::CORPUS_FILE] {
        let bytes = fs::read(dir.join(f)).with_context(|| format!("reading {f}"))?;
        h.update((f.len() as u64).to_le_bytes());
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn load_world(cfg: &RunConfig) -> Result<World> {
    let world = corpus_io::read_world(Path::new(&cfg.corpus)).with_context(|| format!("reading corpus {}", cfg.corpus))?;
    if world.config.d_pin != cfg.train.model.d_pin {
        bail!("corpus d_pin {} differs from configured d_pin {}", world.config.d_pin, cfg.train.model.d_pin);
    }
    Ok(world)
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let world = datasynth::generate_world(&cfg.world)?;
    let out = Path::new(&cfg.out);
    corpus_io::write_world(&world, out)?;
    let n_actions: usize = world.users.iter().map(|u| u.actions.len()).sum();
    println!("users={} pins={} actions={}", world.users.len(), world.pins.len(), n_actions);
    println!("digest={}", corpus_digest(out)?);
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let world = load_world(&cfg)?;
    let out = Path::new(&cfg.out);
    fs::create_dir_all(out)?;

    let mut log = String::new();
    let towers = train_towers(&world, &cfg.train, |s| {
        if let Some(l) = s.loss {
            log += &format!("step={} loss={l:?}\n", s.step);
        }
    })?;
    fs::write(out.join(METRICS_LOG), &log)?;
    let mut params = towers.params.clone();

    if cfg.ranker.steps > 0 {
        let mut lt = LongTermEmbedder::new(&world, &towers.params, &cfg.train.model);
        let mut rlog = String::new();
        let ranker = realtime::train_ranker(&world, &mut lt, &cfg.realtime, &cfg.ranker, |step, l| {
            rlog += &format!("step={step} loss={l:?}\n");
        })?;
        fs::write(out.join(RANKER_LOG), &rlog)?;
        params.merge_prefixed(&ranker.params, realtime::RANKER)?;
    }
    let ck = checkpoint_path(&cfg);
    if let Some(dir) = ck.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&params, &ck)?;
    fs::write(out.join(RUN_CONF), cfg.render())?;
    let last = towers.losses().last().unwrap_or(f64::NAN);
    println!("steps={} final_loss={last:?} params={}", cfg.train.steps, params.num_scalars());
    println!("checkpoint={}", ck.display());
    Ok(())
}

fn has_ranker(params: &ParamStore) -> bool {
    params.iter().any(|p| p.name.starts_with(realtime::RANKER))
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let report = if m.get_flag("compare") {
        compare_losses(&cfg.seeds, &cfg.world, &cfg.train, &LossKind::ALL)?
    } else {
        let world = load_world(&cfg)?;
        let params = checkpoint::load(&checkpoint_path(&cfg))?;
        let model = cfg.train.objective.loss_kind.name().to_string();
        let seed = cfg.train.seed;
        let rec = evaluate_retrieval(&world, &params, &cfg.train.model, cfg.train.held_out_fraction, cfg.eval_window_days, &RECALL_KS)?;
        let mut rows: Vec<EvalRow> = rec
            .recall
            .iter()
            .map(|&(k, v)| EvalRow {
                metric: format!("recall@{k}"),
                model: model.clone(),
                seed,
                value: v,
            })
            .collect();
        if has_ranker(&params) {
            let mut lt = LongTermEmbedder::new(&world, &params, &cfg.train.model);
            let events = held_out_events(&world, cfg.ranker.held_out_fraction, cfg.eval_window_days);
            let auc = ranker_auc(&world, &events, &mut lt, &params, &cfg.realtime, cfg.realtime.mask_window_seconds)?;
            rows.push(EvalRow {
                metric: "ranker_auc".into(),
                model: "ranker".into(),
                seed,
                value: auc,
            });
        }
        EvalReport { rows, failures: vec![] }
    };
    print!("{}", report.table());
    println!();
    print!("{}", report.machine_lines());
    Ok(())
}

fn cmd_rank(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let world = load_world(&cfg)?;
    let params = checkpoint::load(&checkpoint_path(&cfg))?;
    if !has_ranker(&params) {
        bail!("checkpoint has no ranker parameters (trained with ranker_steps = 0?)");
    }
    let user = *m.get_one::<u32>("user").expect("required");
    let history = &world
        .users
        .get(user as usize)
        .ok_or_else(|| anyhow!("unknown user {user}"))?
        .actions;
    let time = m.get_one::<i64>("time").copied().unwrap_or_else(|| world.horizon_end());
    let path = m.get_one::<String>("candidates").expect("required");
    let mut candidates = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            candidates.push(line.parse::<u32>().with_context(|| format!("{path}:{}: bad pin id `{line}`", i + 1))?);
        }
    }
    let mut lt = LongTermEmbedder::new(&world, &params, &cfg.train.model);
    let long_term = lt
        .get(user, time)?
        .ok_or_else(|| anyhow!("user {user} has no history before the day of {time}"))?;
    let realtime_actions: Vec<_> = history.iter().filter(|a| a.timestamp <= time).copied().collect();
    let mut scored = Vec::with_capacity(candidates.len());
    for &pin in &candidates {
        let req = RankRequest {
            long_term: long_term.to_vec(),
            realtime: realtime_actions.clone(),
            candidate: pin,
            request_time: time,
        };
        scored.push((pin, realtime::rank_score(&params, &cfg.realtime, &req, &world.pins, cfg.realtime.mask_window_seconds)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (pin, s) in scored {
        println!("{pin} {s:.6}");
    }
    Ok(())
}

fn cmd_plan(m: &ArgMatches) -> Result<()> {
    let path = m.get_one::<String>("graph").expect("defaulted");
    let g = parse_graph(&fs::read_to_string(path).with_context(|| format!("reading {path}"))?)?;
    let t = TransferModel::parse(m.get_one::<String>("transfer").expect("defaulted"))?;
    match m.get_one::<String>("mode").map(String::as_str) {
        Some("search") => {
            let r = search_placement(&g, &t, *m.get_one::<u64>("budget").expect("defaulted"))?;
            println!("mode={:?} evaluated={} truncated={}", r.mode, r.evaluated, r.truncated);
            println!("latency_us={:.2}", r.latency_us);
            println!("matches_plan={}", named_plan_of(&g, &r.placement).unwrap_or("none"));
            println!("placement: {}", r.placement.describe(&g));
            for (n, d) in g.nodes().zip(&r.placement.0) {
                println!("  {} {} {d}", n.id, n.kind.name());
            }
        }
        _ => {
            let report = evaluate_named_plans(&g, &t)?;
            print!("{}", report.render());
            for r in &report.rows {
                println!("plan={} latency_us={:.4} increase_pct={:.4}", r.label, r.latency_us, r.increase_pct);
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let gc = GradCheckConfig {
        max_coords: *m.get_one::<usize>("coords").expect("defaulted"),
        seed: cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let report = check_tower_gradients(cfg.train.seed, &gc)?;
    println!("coords={} max_rel_err={:e} tolerance={:e}", report.coords_checked, report.max_rel_err, report.tolerance);
    if !report.passed() {
        bail!("gradient check failed: max relative error {:e}", report.max_rel_err);
    }
    println!("ok");
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "synth" => cmd_synth(sub),
        "train" => cmd_train(sub),
        "eval" => cmd_eval(sub),
        "rank" => cmd_rank(sub),
        "plan" => cmd_plan(sub),
        "gradcheck" => cmd_gradcheck(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
