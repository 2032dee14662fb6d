use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infershare_cli::client::Client;
use infershare_cli::controller::{controller_handle, serve_controller};
use infershare_cli::message::{Infer, Message, Upload, WireInput, WireTensor};
use infershare_cli::node::{serve_worker, NodeHandle, NodeOptions};
use infershare_core::config::ClusterConfig;
use infershare_core::executor::{execute_model, generate_weights, Tensor};
use infershare_core::manifest::{parse_document, parse_manifest, validate_manifest};
use infershare_sim::scenario::Scenario;
use infershare_sim::sweep::run_sweep;
use infershare_sim::trace::{read_jsonl, write_jsonl};
use infershare_sim::vm::run_vm_baseline;
use infershare_sim::{compute_report, run_simulation};

const DEFAULT_CONTROLLER: &str = "127.0.0.1:7400";

/// Shared multi-tenant DNN inference: cluster processes, client and simulator.
#[derive(Parser)]
#[command(name = "infershare", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Controller process.
    Controller {
        #[command(subcommand)]
        action: ControllerCmd,
    },
    /// Worker process.
    Worker {
        #[command(subcommand)]
        action: WorkerCmd,
    },
    /// Run a scenario in the discrete-event simulator.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for CSV reports and the trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Register a model manifest with the controller.
    Upload {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "default")]
        tenant: String,
        #[arg(long, default_value = DEFAULT_CONTROLLER)]
        controller: String,
    },
    /// Send one inference request.
    Infer {
        /// Model id, `tenant/name`.
        #[arg(long)]
        model: String,
        /// Input tensor as JSON `{"batch", "dims", "values"}`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Deadline in milliseconds.
        #[arg(long)]
        deadline: Option<f64>,
        #[arg(long, default_value = DEFAULT_CONTROLLER)]
        controller: String,
    },
    /// Print the stats document of a controller or worker.
    Stats {
        #[arg(long, default_value = DEFAULT_CONTROLLER)]
        addr: String,
    },
    /// Recompute metrics from a trace file.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a manifest through the reference executor locally.
    Exec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum ControllerCmd {
    Run {
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long)]
        listen: Option<String>,
        /// Registry journal, replayed on start.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WorkerCmd {
    Run {
        #[command(flatten)]
        cluster: ClusterArgs,
        /// Device profile, built in or from the cluster config.
        #[arg(long)]
        profile: String,
        #[arg(long, default_value = "w1")]
        id: String,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        controller: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ClusterArgs {
    /// Cluster config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ClusterArgs {
    fn load(&self) -> Result<ClusterConfig, String> {
        match &self.config {
            Some(p) => ClusterConfig::from_toml(&read(p)?).map_err(|e| format!("{}: {e}", p.display())),
            None => Ok(ClusterConfig::default()),
        }
    }
}

fn read(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, String> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Cmd::Controller {
            action: ControllerCmd::Run { cluster, listen, journal },
        } => {
            let config = cluster.load()?;
            let addr = listen.unwrap_or_else(|| config.controller_addr.clone());
            let handle = controller_handle(&config, journal.as_deref()).map_err(|e| e.to_string())?;
            runtime()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("{addr}: {e}"))?;
                eprintln!("controller listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
                serve_controller(listener, handle).await.map_err(|e| e.to_string())
            })
        }
        Cmd::Worker {
            action:
                WorkerCmd::Run {
                    cluster,
                    profile,
                    id,
                    listen,
                    controller,
                    seed,
                },
        } => {
            let config = cluster.load()?;
            let device = config.profile(&profile).ok_or_else(|| format!("unknown device profile `{profile}`"))?;
            let def = config.workers.iter().find(|w| w.id == id);
            let worker_config = match def {
                Some(d) => config.worker_config(d),
                None => config.scheduler.clone(),
            };
            let listen = listen
                .or_else(|| def.and_then(|d| d.addr.clone()))
                .unwrap_or_else(|| "127.0.0.1:0".into());
            let controller = controller.unwrap_or_else(|| config.controller_addr.clone());
            let opts = NodeOptions {
                worker_id: id,
                profile: device,
                config: worker_config,
                noise: config.noise_model(),
                seed,
                heartbeat_ms: config.controller.heartbeat_ms,
            };
            let handle = NodeHandle::new(&opts);
            runtime()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| format!("{listen}: {e}"))?;
                eprintln!(
                    "worker {} listening on {}",
                    opts.worker_id,
                    listener.local_addr().map_err(|e| e.to_string())?
                );
                serve_worker(listener, &controller, opts, handle).await.map_err(|e| e.to_string())
            })
        }
        Cmd::Simulate { scenario, seed, out } => simulate(&scenario, seed, out.as_deref()),
        Cmd::Upload {
            manifest,
            tenant,
            controller,
        } => {
            let text = read(&manifest)?;
            let parsed = parse_document(&text).map_err(|e| format!("manifest rejected: {e}"))?;
            let report = validate_manifest(&parsed);
            if !report.is_ok() {
                let lines: Vec<String> = report.findings.iter().map(|f| format!("  - {f}")).collect();
                return Err(format!(
                    "manifest rejected with {} finding(s):\n{}",
                    lines.len(),
                    lines.join("\n")
                ));
            }
            let msg = Message::UploadModel(Upload {
                request_id: 1,
                tenant_id: tenant,
                manifest: text,
            });
            match call(&controller, &msg)? {
                Message::Uploaded(u) => {
                    println!("{}", u.model_id);
                    Ok(())
                }
                other => Err(describe(other)),
            }
        }
        Cmd::Infer {
            model,
            input,
            deadline,
            controller,
        } => {
            let tenant = model.split_once('/').map(|(t, _)| t.to_string()).unwrap_or_default();
            let (batch, input) = match input {
                Some(p) => {
                    let t: Tensor = serde_json::from_str(&read(&p)?).map_err(|e| format!("{}: {e}", p.display()))?;
                    let t = Tensor::new(t.batch, t.dims, t.values).map_err(|e| e.to_string())?;
                    (
                        t.batch as u32,
                        WireInput::Tensor {
                            tensor: WireTensor::encode(&t),
                        },
                    )
                }
                None => (1, WireInput::Size { bytes: 0 }),
            };
            let msg = Message::Infer(Infer {
                request_id: 1,
                tenant_id: tenant,
                model_id: model,
                deadline_ms: deadline,
                batch,
                input,
            });
            match call(&controller, &msg)? {
                Message::InferResult(r) => {
                    let output = match &r.output {
                        Some(w) => Some(w.decode().map_err(|e| e.to_string())?),
                        None => None,
                    };
                    let doc = serde_json::json!({
                        "model_id": r.model_id,
                        "worker_id": r.worker_id,
                        "residency": r.residency,
                        "latency_ms": r.latency_ms,
                        "estimate_ms": r.estimate_ms,
                        "output": output,
                    });
                    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
                    Ok(())
                }
                other => Err(describe(other)),
            }
        }
        Cmd::Stats { addr } => match call(&addr, &Message::StatsRequest { request_id: 1 })? {
            Message::Stats { stats, .. } => {
                println!("{}", serde_json::to_string_pretty(&stats).expect("json"));
                Ok(())
            }
            other => Err(describe(other)),
        },
        Cmd::Report { trace, out } => {
            let f = fs::File::open(&trace).map_err(|e| format!("{}: {e}", trace.display()))?;
            let records = read_jsonl(BufReader::new(f)).map_err(|e| format!("{}: {e}", trace.display()))?;
            let report = compute_report(&records);
            if let Some(dir) = out {
                report.write_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            }
            print!("{}", report.models_csv());
            Ok(())
        }
        Cmd::Exec { manifest, input } => {
            let m = parse_manifest(&read(&manifest)?).map_err(|e| e.to_string())?;
            let t: Tensor = serde_json::from_str(&read(&input)?).map_err(|e| format!("{}: {e}", input.display()))?;
            let t = Tensor::new(t.batch, t.dims, t.values).map_err(|e| e.to_string())?;
            let out = execute_model(&m, &generate_weights(&m), &t).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string(&out).expect("json"));
            Ok(())
        }
    }
}

fn call(addr: &str, msg: &Message) -> Result<Message, String> {
    runtime()?.block_on(async {
        let mut c = Client::connect(addr).await.map_err(|e| format!("{addr}: {e}"))?;
        c.request(msg).await.map_err(|e| format!("{addr}: {e}"))
    })
}

fn describe(reply: Message) -> String {
    match reply {
        Message::Error(e) => {
            let mut s = format!("{:?}: {}", e.code, e.message);
            for f in &e.findings {
                s.push_str(&format!("\n  - {f}"));
            }
            s
        }
        other => format!("unexpected {:?} reply", other.kind()),
    }
}

fn simulate(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), String> {
    let sc = Scenario::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let seed = seed.unwrap_or(sc.seed);
    let sim = run_simulation(&sc, seed).map_err(|e| e.to_string())?;
    let io = |e: std::io::Error| e.to_string();
    if let Some(dir) = out {
        sim.report.write_dir(dir).map_err(io)?;
        let f = fs::File::create(dir.join("trace.jsonl")).map_err(io)?;
        write_jsonl(&sim.trace, std::io::BufWriter::new(f)).map_err(io)?;
        if sc.sweep.is_some() {
            let sweep = run_sweep(&sc, seed).map_err(|e| e.to_string())?;
            fs::write(dir.join("sweep.csv"), sweep.to_csv()).map_err(io)?;
            match sweep.crossover {
                Some(h) => eprintln!("bottleneck crossover at hit ratio {h:.4}"),
                None => eprintln!("no bottleneck crossover in the swept range"),
            }
        }
        if sc.vm_baseline.is_some() {
            let vm = run_vm_baseline(&sc, seed).map_err(|e| e.to_string())?;
            let vm_dir = dir.join("vm");
            vm.report.write_dir(&vm_dir).map_err(io)?;
            fs::write(vm_dir.join("vms.csv"), vm.vms_csv()).map_err(io)?;
        }
    }
    print!("{}", sim.report.models_csv());
    Ok(())
}
