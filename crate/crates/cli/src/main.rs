//! `psi-spir`: parameters, query tables, PSI runs, transcript checks and
//! privacy audits from the command line.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use psi_spir::audit::{
    audit_db_privacy, audit_reliability, audit_user_privacy, AuditError, AuditInstance, Verdict,
};
use psi_spir::block::BlockMutation;
use psi_spir::params::{
    lspir_cost, mm_spir_capacity, psi_optimal_cost, ParamsError, TableParameters,
};
use psi_spir::psi::{
    generate_sets, read_incidence_file, read_set_file, run_psi_over, to_incidence,
    verify_transcript, write_incidence_file, write_set_file, Backend, Deployment, EntityConfig,
    EntityId, Network, PsiError,
};
use psi_spir::rng::Seeds;
use psi_spir::scheme::IndexSet;
use psi_spir::table::{Repetition, TableMutation, TableStructure};
use psi_spir::transport::Transcript;

const EXIT_USAGE: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "psi-spir",
    version,
    about = "Private set intersection over replicated non-colluding databases"
)]
struct Cli {
    /// Emit one JSON object per line instead of human-readable text.
    #[arg(long, global = true)]
    machine: bool,

    #[command(flatten)]
    seeds: SeedArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SeedArgs {
    /// Seed of the querying client's private randomness.
    #[arg(long, global = true, env = "PSI_SEED_CLIENT", default_value_t = 1)]
    seed_client: u64,
    /// Seed of the databases' common randomness.
    #[arg(long, global = true, env = "PSI_SEED_CR", default_value_t = 2)]
    seed_cr: u64,
    /// Seed of message contents and generated sets.
    #[arg(long, global = true, env = "PSI_SEED_MSG", default_value_t = 3)]
    seed_msg: u64,
}

impl SeedArgs {
    fn seeds(self) -> Seeds {
        Seeds::new(self.seed_client, self.seed_cr, self.seed_msg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rounds, repetition count and cost ledger for (K, P, N).
    Params {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        n: usize,
        /// Message length for the block scheme's costs.
        #[arg(long, default_value_t = 1)]
        l: u64,
    },
    /// Render the table scheme's query table with its cost summary.
    Table {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        n: usize,
        /// Desired messages, 0-based and comma separated (default: the first P).
        #[arg(long, value_delimiter = ',')]
        desired: Option<Vec<usize>>,
        /// Fixed repetition count instead of the smallest balanced one.
        #[arg(long)]
        nu: Option<usize>,
        /// Print only the summary line.
        #[arg(long)]
        summary_only: bool,
    },
    /// Private set intersection.
    #[command(subcommand)]
    Psi(PsiCommand),
    /// Exhaustive privacy and reliability audits on small instances.
    Audit {
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Desired-set sizes to audit, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        p: Vec<usize>,
        /// Database counts to audit, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2")]
        n: Vec<usize>,
        /// Message length (block scheme only).
        #[arg(long, default_value_t = 1)]
        l: usize,
        #[arg(long, default_value_t = 2)]
        q: u32,
        /// Audit a deliberately broken variant.
        #[arg(long, value_enum)]
        mutant: Option<MutantArg>,
        /// Random decode trials for the reliability check.
        #[arg(long, default_value_t = 50)]
        trials: u64,
    },
}

#[derive(Subcommand, Debug)]
enum PsiCommand {
    /// Draw two random sets and write set and incidence files.
    Gen {
        #[arg(long)]
        k: usize,
        /// Inclusion probability for E1's set.
        #[arg(long, default_value_t = 0.5)]
        q1: f64,
        /// Inclusion probability for E2's set.
        #[arg(long, default_value_t = 0.5)]
        q2: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the protocol between two entities.
    Run {
        #[command(flatten)]
        entities: EntityArgs,
        #[command(flatten)]
        net: NetArgs,
        /// Write the client transcript here (binary).
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Also print the transcript as text.
        #[arg(long)]
        dump: bool,
        /// Send the result to the responding entity.
        #[arg(long)]
        forward: bool,
    },
    /// Replay a saved transcript and check every byte and the result.
    Verify {
        #[command(flatten)]
        entities: EntityArgs,
        #[arg(long)]
        transcript: PathBuf,
        /// Print the transcript as text.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Args, Debug)]
struct EntityArgs {
    /// E1's set file (or incidence file).
    #[arg(long)]
    set1: PathBuf,
    /// E2's set file (or incidence file).
    #[arg(long)]
    set2: PathBuf,
    /// Databases of E1.
    #[arg(long, default_value_t = 2)]
    n1: usize,
    /// Databases of E2.
    #[arg(long, default_value_t = 2)]
    n2: usize,
}

#[derive(Args, Debug)]
struct NetArgs {
    #[arg(long, value_enum, env = "PSI_TRANSPORT", default_value_t = TransportArg::Sim)]
    transport: TransportArg,
    /// First listen address for TCP databases; port 0 picks free ports.
    #[arg(long, env = "PSI_LISTEN", default_value = "127.0.0.1:0")]
    listen: SocketAddr,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TransportArg {
    Sim,
    Tcp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SchemeArg {
    Table,
    Block,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MutantArg {
    /// Block scheme: probes sent without the base mask.
    UnmaskedProbe,
    /// Block scheme: answers without common randomness.
    NoCommonRandomness,
    /// Table scheme: common-randomness ids sent unpermuted.
    StructuralCrIds,
    /// Table scheme: undesired sums left unmasked.
    NoHiddenCr,
}

enum Failure {
    Usage(anyhow::Error),
    Protocol(anyhow::Error),
    Audit(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn protocol(e: PsiError) -> Failure {
    match e {
        PsiError::Transport(_)
        | PsiError::Handshake(_)
        | PsiError::Replay(_)
        | PsiError::Scheme(_) => Failure::Protocol(e.into()),
        other => Failure::Usage(other.into()),
    }
}

struct Out {
    machine: bool,
}

impl Out {
    fn emit(&self, human: impl FnOnce() -> String, record: serde_json::Value) {
        if self.machine {
            say(&format!("{record}\n"));
        } else {
            say(&format!("{}\n", human()));
        }
    }
}

/// Writes to stdout; a closed pipe ends the process quietly.
fn say(text: &str) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout
        .write_all(text.as_bytes())
        .and_then(|()| stdout.flush())
    {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(i32::from(EXIT_USAGE));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Out {
        machine: cli.machine,
    };
    match run(cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Protocol(e)) => {
            eprintln!("protocol fault: {e:#}");
            ExitCode::from(EXIT_PROTOCOL)
        }
        Err(Failure::Audit(what)) => {
            eprintln!("audit failed: {what}");
            ExitCode::from(EXIT_AUDIT)
        }
    }
}

fn run(cli: Cli, out: &Out) -> Result<(), Failure> {
    let seeds = cli.seeds.seeds();
    match cli.command {
        Command::Params { k, p, n, l } => cmd_params(out, k, p, n, l),
        Command::Table {
            k,
            p,
            n,
            desired,
            nu,
            summary_only,
        } => cmd_table(out, k, p, n, desired, nu, summary_only),
        Command::Psi(PsiCommand::Gen { k, q1, q2, out_dir }) => {
            cmd_gen(out, k, q1, q2, &out_dir, seeds)
        }
        Command::Psi(PsiCommand::Run {
            entities,
            net,
            transcript,
            dump,
            forward,
        }) => cmd_run(
            out,
            &entities,
            &net,
            transcript.as_deref(),
            dump,
            forward,
            seeds,
        ),
        Command::Psi(PsiCommand::Verify {
            entities,
            transcript,
            dump,
        }) => cmd_verify(out, &entities, &transcript, dump),
        Command::Audit {
            scheme,
            k,
            p,
            n,
            l,
            q,
            mutant,
            trials,
        } => cmd_audit(out, scheme, k, &p, &n, l, q, mutant, trials),
    }
}

fn cmd_params(out: &Out, k: usize, p: usize, n: usize, l: u64) -> Result<(), Failure> {
    let block = lspir_cost(p as u64, n as u64, l).context("block-scheme costs")?;
    let t = match TableParameters::new(k, p, n) {
        Ok(t) => Some(t),
        Err(ParamsError::DownloadAll(_)) => None,
        Err(e) => return Err(Failure::Usage(e.into())),
    };
    let Some(t) = t else {
        out.emit(
            || format!("P = K = {k}: every message is desired; download all {k}·L symbols from one database (rate 1)\nblock scheme, L = {l}: D = {}, H(S) = {}", block.download, block.randomness),
            json!({"k": k, "p": p, "n": n, "download_all": true, "block": block}),
        );
        return Ok(());
    };
    let alpha: Vec<String> = t.alpha.values().iter().map(ToString::to_string).collect();
    let length = t.message_length(&t.nu);
    let downloads = t.total_downloads(&t.nu);
    let randomness = t.total_randomness(&t.nu);
    let rate = t.ledger.rate();
    let capacity = mm_spir_capacity(k, p, n, &(randomness.clone() / length.clone()));
    out.emit(
        || {
            format!(
                "K={k} P={p} N={n}\nalpha = ({})\nnu = {}\ntable scheme: L = {length}, D = {downloads}, H(S) = {randomness}, rate {rate} (capacity {capacity})\nblock scheme, L = {l}: D = {}, H(S) = {}",
                alpha.join(", "),
                t.nu,
                block.download,
                block.randomness
            )
        },
        json!({
            "k": k, "p": p, "n": n,
            "alpha": alpha,
            "nu": t.nu.to_string(),
            "message_length": length.to_string(),
            "downloads": downloads.to_string(),
            "randomness": randomness.to_string(),
            "rate": rate.to_string(),
            "capacity": capacity.to_string(),
            "block": block,
        }),
    );
    Ok(())
}

fn cmd_table(
    out: &Out,
    k: usize,
    p: usize,
    n: usize,
    desired: Option<Vec<usize>>,
    nu: Option<usize>,
    summary_only: bool,
) -> Result<(), Failure> {
    if p == k && k > 0 {
        out.emit(
            || format!("P = K = {k}: every message is desired; download all {k}·L symbols from one database instead (rate 1, no common randomness)"),
            json!({"k": k, "p": p, "n": n, "download_all": true}),
        );
        return Ok(());
    }
    let desired =
        IndexSet::new(k, desired.unwrap_or_else(|| (0..p).collect())).context("desired set")?;
    let repetition = nu.map_or(Repetition::Balanced, Repetition::Fixed);
    let s =
        TableStructure::build(k, p, n, &desired, repetition).context("building the query table")?;
    let summary = s.summary();
    if !out.machine && !summary_only {
        say(&format!("{}\n", s.render()));
    }
    out.emit(
        || summary.line(),
        json!({
            "k": k, "p": p, "n": n,
            "nu": summary.nu,
            "message_length": summary.message_length,
            "balanced": summary.balanced,
            "desired_symbols": summary.desired_symbols,
            "downloads": summary.downloads,
            "randomness": summary.randomness,
            "rate": summary.rate().to_string(),
            "summary": summary.line(),
        }),
    );
    Ok(())
}

fn check_probability(name: &str, q: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&q) {
        bail!("{name} = {q} is not a probability");
    }
    Ok(())
}

fn cmd_gen(out: &Out, k: usize, q1: f64, q2: f64, dir: &Path, seeds: Seeds) -> Result<(), Failure> {
    check_probability("--q1", q1)?;
    check_probability("--q2", q2)?;
    let (a, b) = generate_sets(k, q1, q2, seeds.msg);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, set) in [("e1", &a), ("e2", &b)] {
        let set_path = dir.join(format!("{name}.set"));
        let inc_path = dir.join(format!("{name}.incidence"));
        fs::write(&set_path, write_set_file(set, k))
            .with_context(|| format!("writing {}", set_path.display()))?;
        let inc = to_incidence(set, k).map_err(anyhow::Error::from)?;
        fs::write(&inc_path, write_incidence_file(&inc))
            .with_context(|| format!("writing {}", inc_path.display()))?;
        out.emit(
            || format!("{name}: {} elements -> {} ({})", set.len(), set_path.display(), inc.bit_string()),
            json!({"entity": name, "k": k, "size": set.len(), "set": set_path, "incidence": inc_path, "bits": inc.bit_string()}),
        );
    }
    Ok(())
}

/// Reads a set file, or an incidence file, by its header.
fn read_entity_set(path: &Path) -> anyhow::Result<(usize, BTreeSet<usize>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if text.starts_with("# psi-spir incidence") {
        read_incidence_file(&text).map(|v| (v.universe(), v.to_set()))
    } else {
        read_set_file(&text)
    };
    parsed.with_context(|| format!("parsing {}", path.display()))
}

fn load_entities(args: &EntityArgs) -> anyhow::Result<(EntityConfig, EntityConfig)> {
    let (k1, s1) = read_entity_set(&args.set1)?;
    let (k2, s2) = read_entity_set(&args.set2)?;
    if k1 != k2 {
        bail!("set files disagree on the universe: K={k1} vs K={k2}");
    }
    psi_optimal_cost(
        s1.len() as u64,
        args.n1 as u64,
        s2.len() as u64,
        args.n2 as u64,
    )
    .map_err(|e| anyhow!("{e}: give at least one entity two or more databases"))?;
    Ok((
        EntityConfig::new(EntityId::E1, k1, args.n1, s1)?,
        EntityConfig::new(EntityId::E2, k2, args.n2, s2)?,
    ))
}

fn cmd_run(
    out: &Out,
    entities: &EntityArgs,
    net: &NetArgs,
    transcript_path: Option<&Path>,
    dump: bool,
    forward: bool,
    seeds: Seeds,
) -> Result<(), Failure> {
    let (e1, e2) = load_entities(entities)?;
    let backend = match net.transport {
        TransportArg::Sim => Backend::Sim,
        TransportArg::Tcp => Backend::Tcp(net.listen),
    };
    let deployment = Deployment::new(&e1, &e2).map_err(protocol)?;
    let network = Network::start(&deployment, backend).map_err(protocol)?;
    let r = run_psi_over(&deployment, &network, &e1, &e2, seeds, forward).map_err(protocol)?;
    if let Some(path) = transcript_path {
        fs::write(path, r.transcript.encode())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if dump && !out.machine {
        say(&r.transcript.dump_text());
    }
    let items: Vec<usize> = r.intersection.iter().copied().collect();
    out.emit(
        || {
            format!(
                "intersection {items:?}\ninitiator {}\ndownloaded {} bits (optimal {})\ncommon randomness {} bits",
                r.initiator, r.download_bits, r.expected_cost, r.randomness
            )
        },
        json!({
            "intersection": items,
            "initiator": r.initiator,
            "download_bits": r.download_bits,
            "expected_cost": r.expected_cost,
            "randomness": r.randomness,
            "transport": format!("{:?}", net.transport).to_lowercase(),
            "transcript": transcript_path,
        }),
    );
    Ok(())
}

fn cmd_verify(out: &Out, entities: &EntityArgs, path: &Path, dump: bool) -> Result<(), Failure> {
    let (e1, e2) = load_entities(entities)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let transcript = Transcript::decode(&bytes)
        .map_err(|e| Failure::Protocol(anyhow!("{}: {e}", path.display())))?;
    if dump && !out.machine {
        say(&transcript.dump_text());
    }
    let intersection = verify_transcript(&transcript, &e1, &e2).map_err(protocol)?;
    let items: Vec<usize> = intersection.into_iter().collect();
    out.emit(
        || {
            format!(
                "transcript verified: {} entries replay byte for byte, intersection {items:?}",
                transcript.entries.len()
            )
        },
        json!({"verified": true, "entries": transcript.entries.len(), "intersection": items}),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_audit(
    out: &Out,
    scheme: SchemeArg,
    k: usize,
    ps: &[usize],
    ns: &[usize],
    l: usize,
    q: u32,
    mutant: Option<MutantArg>,
    trials: u64,
) -> Result<(), Failure> {
    let (table_mutation, block_mutation) = match (scheme, mutant) {
        (_, None) => (None, None),
        (SchemeArg::Block, Some(MutantArg::UnmaskedProbe)) => {
            (None, Some(BlockMutation::UnmaskedProbe))
        }
        (SchemeArg::Block, Some(MutantArg::NoCommonRandomness)) => {
            (None, Some(BlockMutation::NoCommonRandomness))
        }
        (SchemeArg::Table, Some(MutantArg::StructuralCrIds)) => {
            (Some(TableMutation::StructuralCrIds), None)
        }
        (SchemeArg::Table, Some(MutantArg::NoHiddenCr)) => (Some(TableMutation::NoHiddenCr), None),
        (s, Some(m)) => {
            return Err(Failure::Usage(anyhow!(
                "mutant {m:?} does not apply to the {s:?} scheme"
            )))
        }
    };
    let mut failures = Vec::new();
    for &p in ps {
        for &n in ns {
            let inst = match scheme {
                SchemeArg::Table => AuditInstance::table(k, p, n, q, table_mutation),
                SchemeArg::Block => AuditInstance::block(k, p, n, l, q, block_mutation),
            };
            let name = match scheme {
                SchemeArg::Table => "table",
                SchemeArg::Block => "block",
            };
            let label = format!("{name}(K={k}, P={p}, N={n}, L={l}, q={q})");
            let verdicts = [
                audit_user_privacy(&inst),
                audit_db_privacy(&inst),
                audit_reliability(&inst, trials),
            ];
            for v in verdicts {
                let v = v.map_err(|e| match e {
                    AuditError::BudgetExceeded { .. } => {
                        Failure::Usage(anyhow!("{label}: {e}; choose a smaller instance"))
                    }
                    AuditError::Scheme(s) => Failure::Usage(anyhow!("{label}: {s}")),
                })?;
                report(out, &label, mutant, &v);
                if !v.passed {
                    failures.push(format!("{label} {:?}", v.property));
                }
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Audit(failures.join(", ")))
    }
}

fn report(out: &Out, label: &str, mutant: Option<MutantArg>, v: &Verdict) {
    out.emit(
        || {
            format!(
                "{label} {:?}: {} (distance {}, {} outcomes) {}",
                v.property,
                if v.passed { "pass" } else { "FAIL" },
                v.distance,
                v.atoms,
                v.detail
            )
        },
        json!({
            "instance": label,
            "mutant": mutant.map(|m| format!("{m:?}")),
            "property": format!("{:?}", v.property),
            "passed": v.passed,
            "distance": v.distance.to_string(),
            "atoms": v.atoms,
            "detail": v.detail,
        }),
    );
}
