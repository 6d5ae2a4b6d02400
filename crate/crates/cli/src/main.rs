//! `mailburst`: run the service, simulate campaigns, and produce timing
//! and cost reports.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use mailburst::config::{Config, TransportKind};
use mailburst::cost::{self, CostRates, Usage};
use mailburst::domain::{validate_address, Timestamp};
use mailburst::observe::timing_series;
use mailburst::runtime::ClockMode;
use mailburst::sim::{simulate, SimulateArgs};
use mailburst::store::Store;
use mailburst::system::{Engine, Services};
use mailburst::transport::{MockTransport, RuleSet, SmtpTransport, Transport};

#[derive(Parser)]
#[command(name = "mailburst", version, about = "Bulk email campaign engine")]
struct Cli {
    /// JSON config file; MAILBURST_<SECTION>__<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP API and pipeline on the wall clock.
    Serve(ServeArgs),
    /// Run one campaign end to end on the virtual clock.
    Simulate(SimulateCmd),
    /// Campaign duration against size, as CSV with a linear fit.
    Report(ReportArgs),
    /// Monthly cost estimate. Data transfer is billed per 10^9 bytes.
    Cost(CostArgs),
    /// Inspect or edit the suppression list.
    #[command(subcommand)]
    Suppression(SuppressionCmd),
    /// Inspect dead-lettered batches.
    #[command(subcommand)]
    Dlq(DlqCmd),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    /// JSON outcome rules for the mock transport.
    #[arg(long)]
    outcome_rules: Option<PathBuf>,
    /// Journal file for the store.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateCmd {
    #[arg(long)]
    recipients: usize,
    /// Chance that a recipient hard-bounces.
    #[arg(long, default_value_t = 0.05)]
    bounce_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Comma-separated campaign sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<u64>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, allow_negative_numbers = true)]
    sent: i64,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    received: i64,
    /// Average message size in bytes.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    avg_size: i64,
    /// `paper-example`, `paper-sentence`, or a JSON rates file.
    #[arg(long, default_value = "paper-example")]
    rates: String,
    /// Billed compute in GB-seconds.
    #[arg(long, default_value_t = 0.0)]
    gb_seconds: f64,
    /// Queue requests for the month; estimated from `--sent` when absent.
    #[arg(long)]
    queue_requests: Option<u64>,
}

#[derive(Args)]
struct StoreArg {
    /// Journal file; defaults to `store.path` from the config.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SuppressionCmd {
    List(StoreArg),
    Remove {
        address: String,
        #[command(flatten)]
        store: StoreArg,
    },
}

#[derive(Subcommand)]
enum DlqCmd {
    List(StoreArg),
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MAILBURST_LOG").unwrap_or_else(|_| "warn".into()))
        .init();

    let result = Config::load(cli.config.as_deref()).map_err(invalid).and_then(|config| run(cli.cmd, config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd, config: Config) -> Outcome {
    match cmd {
        Cmd::Serve(a) => serve(a, config),
        Cmd::Simulate(a) => {
            if !(0.0..=1.0).contains(&a.bounce_fraction) {
                return Err(invalid("--bounce-fraction must be within [0, 1]"));
            }
            if a.recipients == 0 {
                return Err(invalid("--recipients must be > 0"));
            }
            let args = SimulateArgs { recipients: a.recipients, bounce_fraction: a.bounce_fraction, seed: a.seed };
            print!("{}", simulate(&args, config).map_err(runtime)?);
            Ok(())
        }
        Cmd::Report(a) => {
            if a.sizes.contains(&0) {
                return Err(invalid("sizes must be > 0"));
            }
            print!("{}", timing_series(&a.sizes, &config).map_err(runtime)?.to_csv());
            Ok(())
        }
        Cmd::Cost(a) => cost_cmd(a, &config),
        Cmd::Suppression(SuppressionCmd::List(s)) => {
            let store = open_store(s.store.as_deref(), &config)?;
            println!("address,reason,first_bounced_at,source_campaign_id");
            for e in store.suppression_list() {
                println!("{},{:?},{},{}", e.address, e.reason, e.first_bounced_at, e.source_campaign_id);
            }
            Ok(())
        }
        Cmd::Suppression(SuppressionCmd::Remove { address, store }) => {
            let addr = validate_address(&address).map_err(invalid)?;
            let store = open_store(store.store.as_deref(), &config)?;
            let removed = store.remove_suppression(&addr).map_err(runtime)?;
            println!("removed={removed}");
            Ok(())
        }
        Cmd::Dlq(DlqCmd::List(s)) => {
            let store = open_store(s.store.as_deref(), &config)?;
            println!("queue,message_id,group_id,batch_seq,delivery_count,parked_at");
            for d in store.dead_letters() {
                println!(
                    "{},{},{},{},{},{}",
                    d.queue, d.message_id, d.group_id, d.batch_seq, d.delivery_count, d.parked_at
                );
            }
            Ok(())
        }
    }
}

fn open_store(flag: Option<&Path>, config: &Config) -> Result<Store, Failure> {
    let path = flag
        .or(config.store.path.as_deref())
        .ok_or_else(|| invalid("no store journal given (use --store or store.path)"))?;
    Store::open(path).map_err(runtime)
}

fn cost_cmd(a: CostArgs, config: &Config) -> Outcome {
    let rates = CostRates::resolve(&a.rates).map_err(invalid)?;
    let usage = Usage { sent: a.sent, received: a.received, avg_size_bytes: a.avg_size, gb_seconds: a.gb_seconds };
    let estimate = cost::estimate_monthly(usage, &rates).map_err(invalid)?;
    print!("{}", estimate.to_table());
    let requests =
        a.queue_requests.unwrap_or_else(|| cost::estimated_queue_requests(a.sent as u64, config.limits.max_batch_size));
    let threshold = config.cost.sqs_request_threshold;
    if requests > threshold {
        println!(
            "# note: {requests} queue requests exceed the free-tier threshold of {threshold}; queue charges apply"
        );
    }
    Ok(())
}

fn serve(a: ServeArgs, mut config: Config) -> Outcome {
    if let Some(p) = a.port {
        config.server.port = p;
    }
    if let Some(b) = a.bind {
        config.server.bind = b;
    }
    if let Some(r) = a.outcome_rules {
        config.transport.outcome_rules = Some(r);
    }
    if let Some(s) = a.store {
        config.store.path = Some(s);
    }
    if config.clock.mode != ClockMode::RealTime {
        return Err(invalid("serve runs on the real-time clock; set clock.mode to real_time"));
    }

    let store = Arc::new(match &config.store.path {
        Some(p) => Store::open(p).map_err(runtime)?,
        None => Store::in_memory(),
    });
    let limit = config.limits.payload_limit_bytes;
    let transport: Arc<dyn Transport> = match config.transport.kind {
        TransportKind::Mock => {
            let rules = match &config.transport.outcome_rules {
                Some(p) => RuleSet::load(p).map_err(invalid)?,
                None => RuleSet::default(),
            };
            Arc::new(MockTransport::new(rules, limit))
        }
        TransportKind::Smtp => Arc::new(SmtpTransport::new(&config.transport.smtp, limit).map_err(runtime)?),
    };
    let addr = format!("{}:{}", config.server.bind, config.server.port);
    let now = Timestamp::now_utc();
    let svc = Services::new(config, store, transport, now);
    let engine = Engine::new(svc, ClockMode::RealTime, now).map_err(runtime)?;
    let app = mailburst::gateway::router(engine.gateway());

    let listener = std::net::TcpListener::bind(&addr).map_err(runtime)?;
    listener.set_nonblocking(true).map_err(runtime)?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_http = stop.clone();
    let http = std::thread::spawn(move || -> Result<(), String> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| e.to_string())?;
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            let r = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
            stop_http.store(true, Ordering::SeqCst);
            r.map_err(|e| e.to_string())
        })
    });
    eprintln!("listening on http://{addr}");
    engine.serve(&stop);
    http.join().map_err(|_| runtime("http thread panicked"))?.map_err(runtime)
}
