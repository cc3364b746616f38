//! Workflow implementations behind the subcommands.

use std::fs::File;
use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::rc::Rc;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};

use rungrad::dist::{self, inprocess, tcp, Communicator};
use rungrad::kernel;
use rungrad::links::{self, InitCtx, Mlp};
use rungrad::ops::gradcheck;
use rungrad::optim::{self, ParamUpdater, Rule};
use rungrad::tensor::{snapshot, DType};
use rungrad::training::{Dataset, SerialIterator, Trainer, Updater};

use crate::config::{parse_sizes, RunConfig};

const SYNTHETIC_TRAIN: usize = 512;
const SYNTHETIC_VAL: usize = 256;

pub fn train(config: RunConfig) -> Result<ExitCode> {
    validate(&config)?;
    match (config.workers, config.transport.as_str(), config.rank) {
        (1, _, None) => {
            train_worker(&config, None, true)?;
            Ok(ExitCode::SUCCESS)
        }
        (_, "inprocess", _) => {
            run_in_process(&config, |config, comm, log| train_worker(config, Some(comm), log))?;
            Ok(ExitCode::SUCCESS)
        }
        (_, "tcp", Some(rank)) => {
            let comm = connect_tcp(&config, rank)?;
            train_worker(&config, Some(Rc::new(comm)), rank == 0)?;
            Ok(ExitCode::SUCCESS)
        }
        (_, "tcp", None) => spawn_tcp_children(config),
        (workers, transport, _) => bail!("unsupported worker setup: {} x {}", workers, transport),
    }
}

fn validate(config: &RunConfig) -> Result<()> {
    if config.workers == 0 {
        bail!("workers must be at least 1");
    }
    match config.transport.as_str() {
        "inprocess" | "tcp" => {}
        other => bail!("unknown transport '{}'", other),
    }
    match config.optimizer.as_str() {
        "sgd" | "momentum" | "adam" => {}
        other => bail!("unknown optimizer '{}'", other),
    }
    Ok(())
}

fn optimizer_rule(config: &RunConfig) -> Rule {
    match config.optimizer.as_str() {
        "momentum" => Rule::momentum_sgd(config.lr, config.momentum),
        "adam" => Rule::adam_default(),
        _ => Rule::sgd(config.lr),
    }
}

/// Training dataset pair: full training set (rank 0 / single worker only)
/// and validation set (only used where evaluation happens).
fn load_datasets(config: &RunConfig, is_root: bool) -> Result<(Option<Dataset>, Option<Dataset>)> {
    if !is_root {
        return Ok((None, None));
    }
    if config.dataset == "synthetic" {
        let train = Dataset::synthetic_two_class(SYNTHETIC_TRAIN, config.seed, DType::F32);
        let val = Dataset::synthetic_two_class(SYNTHETIC_VAL, config.seed.wrapping_add(1), DType::F32);
        return Ok((Some(train), Some(val)));
    }
    if let Some(spec) = config.dataset.strip_prefix("idx:") {
        let Some((images, labels)) = spec.split_once(',') else {
            bail!("idx dataset spec is idx:<images>,<labels>");
        };
        let mut images = File::open(images.trim()).with_context(|| format!("opening {}", images))?;
        let mut labels = File::open(labels.trim()).with_context(|| format!("opening {}", labels))?;
        let full = Dataset::from_idx(&mut images, &mut labels)?;
        // hold out the last tenth for validation
        let split = full.len() - (full.len() / 10).max(1);
        let mut examples = full.into_examples();
        let val = Dataset::new(examples.split_off(split));
        return Ok((Some(Dataset::new(examples)), Some(val)));
    }
    bail!("unknown dataset '{}'", config.dataset);
}

fn train_worker(config: &RunConfig, comm: Option<Rc<Communicator>>, log: bool) -> Result<()> {
    let is_root = comm.as_ref().map(|c| c.rank() == 0).unwrap_or(true);
    let (train_full, val) = load_datasets(config, is_root)?;

    let shard = match &comm {
        Some(comm) => dist::scatter_dataset(train_full.as_ref(), comm, true, config.seed)?,
        None => train_full.expect("single worker loads the dataset"),
    };

    let (n_in, n_out) = model_dims(config, &shard);
    let mut ctx = InitCtx::new(config.seed).with_dtype(DType::F32);
    let model = Mlp::new(n_in, config.n_hid, n_out, &mut ctx)?;
    if let Some(comm) = &comm {
        dist::broadcast_params(&model, comm, 0)?;
    }

    let base = optim::setup(optimizer_rule(config), &model);
    let optimizer: Box<dyn ParamUpdater> = match &comm {
        Some(comm) => Box::new(dist::multi_node_optimizer(base, Rc::clone(comm))),
        None => Box::new(base),
    };

    let iterator = SerialIterator::new(Arc::new(shard), config.batchsize, true, config.seed);
    let updater = Updater::new(iterator, Box::new(model), optimizer);
    let mut trainer = Trainer::new(updater, config.epochs);
    if log {
        if let Some(val) = val {
            trainer = trainer.with_eval(Arc::new(val), 256);
        }
    }

    let report = if log {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        let report = trainer.run(Some(&mut lock))?;
        lock.flush()?;
        report
    } else {
        trainer.run(None)?
    };

    if log {
        if let Some(last) = report.records.last() {
            eprintln!(
                "trained {} epochs: mean loss {:.4}{}",
                last.epoch,
                last.mean_loss,
                last.val_accuracy
                    .map(|a| format!(", val accuracy {:.3}", a))
                    .unwrap_or_default()
            );
        }
    }

    if is_root {
        if let Some(path) = &config.snapshot {
            let mut file = File::create(path).with_context(|| format!("creating {}", path))?;
            links::save(trainer.updater.model.as_ref(), &mut file)?;
            if log {
                eprintln!("saved parameters to {}", path);
            }
        }
    }
    Ok(())
}

fn model_dims(config: &RunConfig, shard: &Dataset) -> (usize, usize) {
    let mut n_in = config.n_in;
    let mut n_out = config.n_out;
    if !shard.is_empty() {
        let d = shard.feature_len();
        if d != n_in {
            eprintln!("note: dataset features are {}-dimensional; overriding n_in={}", d, config.n_in);
            n_in = d;
        }
        let classes = shard.num_classes();
        if classes > n_out {
            eprintln!("note: dataset has {} classes; overriding n_out={}", classes, config.n_out);
            n_out = classes;
        }
    }
    (n_in, n_out)
}

/// Run `f` on `workers` in-process ranks, one thread each; rank 0 logs.
fn run_in_process<F>(config: &RunConfig, f: F) -> Result<()>
where
    F: Fn(&RunConfig, Rc<Communicator>, bool) -> Result<()> + Send + Sync,
{
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for comm in inprocess::in_process_group(config.workers) {
            let f = &f;
            handles.push(scope.spawn(move || {
                let rank = comm.rank();
                f(config, Rc::new(comm), rank == 0).map_err(|e| anyhow!("rank {}: {:#}", rank, e))
            }));
        }
        for handle in handles {
            handle.join().map_err(|_| anyhow!("worker thread panicked"))??;
        }
        Ok(())
    })
}

fn connect_tcp(config: &RunConfig, rank: usize) -> Result<Communicator> {
    if config.endpoints.len() != config.workers {
        bail!(
            "{} endpoints for {} workers",
            config.endpoints.len(),
            config.workers
        );
    }
    Ok(tcp::create_tcp_communicator(rank, &config.endpoints, dist::default_timeout())?)
}

/// Parent mode for TCP runs: reserve loopback ports, write the effective
/// config, and spawn one child process per rank.
fn spawn_tcp_children(mut config: RunConfig) -> Result<ExitCode> {
    let endpoints: Vec<String> = (0..config.workers)
        .map(|_| {
            let listener = TcpListener::bind("127.0.0.1:0").context("reserving a port")?;
            Ok(format!("127.0.0.1:{}", listener.local_addr()?.port()))
        })
        .collect::<Result<_>>()?;
    config.endpoints = endpoints;
    config.rank = None;

    let tmp = std::env::temp_dir().join(format!(
        "rungrad-{}-{}.conf",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default()
    ));
    std::fs::write(&tmp, config.to_kv()).with_context(|| format!("writing {}", tmp.display()))?;

    let exe = std::env::current_exe().context("locating the current executable")?;
    let mut children = Vec::with_capacity(config.workers);
    for rank in 0..config.workers {
        let child = Command::new(&exe)
            .arg(&config.subcommand)
            .arg("--config")
            .arg(&tmp)
            .arg("--rank")
            .arg(rank.to_string())
            .stdout(if rank == 0 { Stdio::inherit() } else { Stdio::null() })
            .spawn()
            .with_context(|| format!("spawning worker {}", rank))?;
        children.push(child);
    }
    let mut ok = true;
    for mut child in children {
        let status = child.wait()?;
        ok &= status.success();
    }
    std::fs::remove_file(&tmp).ok();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn gradcheck(seed: u64) -> Result<ExitCode> {
    let report = gradcheck::check_catalog(seed).map_err(|e| anyhow!("gradcheck failed to run: {}", e))?;
    for entry in &report.entries {
        println!("{}", entry);
    }
    if report.all_passed() {
        eprintln!("gradcheck: {} ops passed", report.entries.len());
        Ok(ExitCode::SUCCESS)
    } else {
        let failed = report.entries.iter().filter(|e| !e.passed).count();
        eprintln!("gradcheck: {} of {} ops FAILED", failed, report.entries.len());
        Ok(ExitCode::from(1))
    }
}

pub fn kernel_eval(sig: &str, out: &str, expr: &str, inputs: &Path) -> Result<ExitCode> {
    let compiled = kernel::compile_elementwise(sig, out, expr, "cli")?;
    let mut file = File::open(inputs).with_context(|| format!("opening {}", inputs.display()))?;
    let records = snapshot::read_all(&mut file)?;
    let bound: Vec<_> = compiled
        .inputs
        .iter()
        .map(|decl| {
            records
                .iter()
                .find(|(path, _)| path == &decl.name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| anyhow!("snapshot has no record named '{}'", decl.name))
        })
        .collect::<Result<_>>()?;
    let result = kernel::eval_elementwise(&compiled, &bound)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    snapshot::write_record(&mut lock, &compiled.outputs[0].name, &result)?;
    lock.flush()?;
    eprintln!(
        "kernel eval: {} -> {} {} {}",
        expr,
        compiled.outputs[0].name,
        result.dtype(),
        result.shape()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn bench_allreduce(config: RunConfig) -> Result<ExitCode> {
    let bytes = parse_sizes(&config.sizes)?;
    let elems: Vec<usize> = bytes.iter().map(|&b| (b / 4).max(1)).collect();
    match (config.transport.as_str(), config.rank) {
        ("inprocess", _) => {
            run_in_process(&config, |config, comm, log| {
                let elems: Vec<usize> = parse_sizes(&config.sizes)
                    .expect("validated above")
                    .iter()
                    .map(|&b| (b / 4).max(1))
                    .collect();
                let rows = dist::bench_allreduce(&comm, &elems, config.iters)?;
                if log {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    dist::write_bench_csv(&rows, &mut lock)?;
                    lock.flush()?;
                    eprintln!("bench-allreduce: {} sizes x {} iters on {} workers", rows.len(), config.iters, comm.size());
                }
                Ok(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
        ("tcp", Some(rank)) => {
            let comm = connect_tcp(&config, rank)?;
            let rows = dist::bench_allreduce(&comm, &elems, config.iters)?;
            if rank == 0 {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                dist::write_bench_csv(&rows, &mut lock)?;
                lock.flush()?;
            }
            Ok(ExitCode::SUCCESS)
        }
        ("tcp", None) => spawn_tcp_children(config),
        (other, _) => bail!("unknown transport '{}'", other),
    }
}
