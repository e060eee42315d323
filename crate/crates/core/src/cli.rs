//! The `fwcomp` command line.
//!
//! Exit codes: 0 success, 1 invalid input, 2 feature not supported by the
//! target (or not known at compile time), 3 file system errors.

use crate::analysis::{detect_shadowing_with_diagnostics, equivalent, optimize, Universe};
use crate::backends::{self, CompileError, Env, Interpreter, Script};
use crate::diag::{has_errors, Diagnostic};
use crate::fwbxml::{self, TableError};
use crate::model::*;
use crate::semantics::{Evaluator, Packet};
use crate::transform::TransformError;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_UNSUPPORTED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fwcomp", version, about = "Compile abstract firewall policies to iptables, pf and ipfilter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Input {
    /// Policy database (.fwb)
    input: PathBuf,
    /// Firewall name; all firewalls when omitted
    #[arg(long = "fw", value_name = "NAME")]
    firewall: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a policy file and print diagnostics
    Validate {
        #[command(flatten)]
        input: Input,
    },
    /// Write one script per firewall
    Compile {
        #[command(flatten)]
        input: Input,
        /// Override the firewall's platform
        #[arg(long, value_name = "iptables|pf|ipfilter")]
        target: Option<Platform>,
        /// Output file, or directory when compiling several firewalls
        #[arg(short = 'o', value_name = "PATH")]
        output: Option<PathBuf>,
        /// Print the lowered rules before emission
        #[arg(long, hide = true)]
        dump_ir: bool,
        /// Check the script against the model over the boundary-point
        /// universe, refusing more than this many packets
        #[arg(long, hide = true, value_name = "BOUND")]
        verify: Option<u64>,
    },
    /// Report shadowed rules; optionally write an optimized copy
    Analyze {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        optimize: bool,
        /// Where to write the optimized database
        #[arg(short = 'o', value_name = "PATH", requires = "optimize")]
        output: Option<PathBuf>,
    },
    /// Print the verdict for one packet
    Simulate {
        #[command(flatten)]
        input: Input,
        /// e.g. "proto=udp src=10.0.0.5 dst=10.86.81.7 sport=50 dport=91 iface=if0 dir=in"
        #[arg(long, value_name = "LITERAL")]
        packet: String,
        /// Run the compiled script for this target instead of the model
        #[arg(long, value_name = "iptables|pf|ipfilter")]
        target: Option<Platform>,
    },
}

/// A failure with its exit code.
struct Fail(i32, String);

impl Fail {
    fn invalid(m: impl Into<String>) -> Self {
        Fail(EXIT_INVALID, m.into())
    }
}

impl From<TransformError> for Fail {
    fn from(e: TransformError) -> Self {
        match e {
            TransformError::Unsupported { .. } | TransformError::Model(ModelError::OpaqueSet { .. }) => {
                Fail(EXIT_UNSUPPORTED, e.to_string())
            }
            e => Fail::invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        TransformError::from(e).into()
    }
}

impl From<CompileError> for Fail {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Transform(t) => t.into(),
            CompileError::Backend(b) => Fail::invalid(b.to_string()),
        }
    }
}

impl From<TableError> for Fail {
    fn from(e: TableError) -> Self {
        let code = match &e {
            TableError::Io { .. } => EXIT_IO,
            TableError::InTable { source, .. } if matches!(**source, TableError::Io { .. }) => EXIT_IO,
            _ => EXIT_INVALID,
        };
        Fail(code, e.to_string())
    }
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn diag(&mut self, d: &Diagnostic) {
        let _ = writeln!(self.err, "{d}");
    }
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let mut ctx = Ctx { out, err };
    let res = match cli.command {
        Command::Validate { input } => validate(&input, &mut ctx),
        Command::Compile {
            input,
            target,
            output,
            dump_ir,
            verify,
        } => compile(&input, target, output.as_deref(), dump_ir, verify, &mut ctx),
        Command::Analyze {
            input,
            optimize,
            output,
        } => analyze(&input, optimize, output.as_deref(), &mut ctx),
        Command::Simulate { input, packet, target } => simulate(&input, &packet, target, &mut ctx),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(Fail(code, msg)) => {
            let _ = writeln!(ctx.err, "error: {msg}");
            code
        }
    }
}

/// Directory that relative address-table paths are resolved against.
fn table_dir(input: &Path) -> PathBuf {
    match std::env::var_os("FWCOMP_TABLE_DIR") {
        Some(d) => PathBuf::from(d),
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

/// Reads, parses, validates and loads compile-time tables. Warnings are
/// printed; errors fail.
fn load(input: &Input, ctx: &mut Ctx) -> Result<ObjectDatabase, Fail> {
    let path = &input.input;
    let text = std::fs::read_to_string(path).map_err(|e| Fail(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    let (db, mut diags) = fwbxml::parse_with_diagnostics(&text).map_err(|e| Fail::invalid(format!("{}: {e}", path.display())))?;
    diags.extend(fwbxml::validate_schema(&db));
    for d in &diags {
        ctx.diag(d);
    }
    if has_errors(&diags) {
        let n = diags.iter().filter(|d| d.is_error()).count();
        return Err(Fail::invalid(format!("{}: {n} validation error(s)", path.display())));
    }
    Ok(fwbxml::load_tables(&db, &table_dir(path))?)
}

fn firewalls<'a>(db: &'a ObjectDatabase, input: &Input) -> Result<Vec<(&'a Object, &'a Firewall)>, Fail> {
    match &input.firewall {
        Some(name) => db
            .firewall(name)
            .map(|f| vec![f])
            .ok_or_else(|| Fail::invalid(format!("no firewall named {name:?}"))),
        None => {
            let all: Vec<_> = db.firewalls().collect();
            if all.is_empty() {
                return Err(Fail::invalid("the file defines no firewall"));
            }
            Ok(all)
        }
    }
}

fn platform_of(fw: &Firewall, target: Option<Platform>) -> Result<Platform, Fail> {
    match target {
        Some(t) => Ok(t),
        None => fw.platform.parse().map_err(|e: String| Fail::invalid(e)),
    }
}

fn validate(input: &Input, ctx: &mut Ctx) -> Result<(), Fail> {
    let db = load(input, ctx)?;
    let fws = firewalls(&db, input)?;
    let _ = writeln!(ctx.out, "ok: {} firewall(s), {} object(s)", fws.len(), db.objects().count());
    Ok(())
}

fn compile(
    input: &Input,
    target: Option<Platform>,
    output: Option<&Path>,
    dump_ir: bool,
    verify: Option<u64>,
    ctx: &mut Ctx,
) -> Result<(), Fail> {
    let db = load(input, ctx)?;
    let fws = firewalls(&db, input)?;
    let out_dir = output.filter(|p| p.is_dir());
    if output.is_some() && out_dir.is_none() && fws.len() > 1 {
        return Err(Fail::invalid("-o must be a directory when compiling several firewalls"));
    }

    // Everything is compiled before anything is written.
    let mut pending: Vec<(PathBuf, Script)> = Vec::new();
    for (o, fw) in fws {
        let t = platform_of(fw, target)?;
        let (lowered, script) = backends::compile(fw, t, &db)?;
        for w in &lowered.warnings {
            ctx.diag(w);
        }
        if dump_ir {
            let _ = write!(ctx.out, "{}", lowered.dump());
        }
        if let Some(bound) = verify {
            verify_script(&script, fw, &db, bound, ctx)?;
        }
        let file = format!("{}.{}.fw", o.name, t);
        let path = match (output, out_dir) {
            (_, Some(d)) => d.join(file),
            (Some(p), None) => p.to_path_buf(),
            (None, None) => PathBuf::from(file),
        };
        pending.push((path, script));
    }
    for (path, script) in pending {
        std::fs::write(&path, script.text()).map_err(|e| Fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))?;
        let _ = writeln!(ctx.out, "wrote {}", path.display());
    }
    Ok(())
}

fn verify_script(script: &Script, fw: &Firewall, db: &ObjectDatabase, bound: u64, ctx: &mut Ctx) -> Result<(), Fail> {
    let mut u = Universe::critical(fw, db);
    u.bound = bound;
    u.check_bound().map_err(|e| Fail::invalid(e.to_string()))?;
    match backends::first_mismatch(script, fw, db, u.packets(), &Env::default()) {
        Ok(None) => {
            let _ = writeln!(ctx.out, "verified {} packets on {}", u.size(), script.target);
            Ok(())
        }
        Ok(Some(m)) => Err(Fail::invalid(format!("script disagrees with the policy: {m}"))),
        Err(e) => Err(Fail(EXIT_UNSUPPORTED, e)),
    }
}

fn analyze(input: &Input, do_optimize: bool, output: Option<&Path>, ctx: &mut Ctx) -> Result<(), Fail> {
    let db = load(input, ctx)?;
    let mut optimized = db.clone();
    for (o, fw) in firewalls(&db, input)? {
        let Some(policy) = &fw.policy else { continue };
        let (reports, diags) = detect_shadowing_with_diagnostics(policy, &db);
        for d in &diags {
            ctx.diag(d);
        }
        let _ = writeln!(ctx.out, "firewall {}: {} shadowed rule(s)", o.name, reports.len());
        for r in &reports {
            let _ = writeln!(ctx.out, "{r}");
        }
        if do_optimize {
            let p = optimize(policy, &db);
            let _ = writeln!(
                ctx.out,
                "firewall {}: optimized {} rule(s) into {}",
                o.name,
                policy.rules.len(),
                p.rules.len()
            );
            // A bounded self-check; skipped when the universe is too big.
            let u = Universe::critical(fw, &db);
            if let Ok(false) = equivalent(policy, &p, &u, &db) {
                return Err(Fail::invalid(format!("optimizing {} changed its verdicts", o.name)));
            }
            optimized = optimized.with_policy(&o.id, p)?;
        }
    }
    if do_optimize {
        if let Some(path) = output {
            std::fs::write(path, fwbxml::serialize(&optimized))
                .map_err(|e| Fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))?;
            let _ = writeln!(ctx.out, "wrote {}", path.display());
        }
    }
    Ok(())
}

fn simulate(input: &Input, literal: &str, target: Option<Platform>, ctx: &mut Ctx) -> Result<(), Fail> {
    let db = load(input, ctx)?;
    let fws = firewalls(&db, input)?;
    let [(_, fw)] = fws[..] else {
        return Err(Fail::invalid("simulate needs --fw when the file has several firewalls"));
    };
    let now = chrono::Local::now().naive_local();
    let packet = Packet::parse_literal(literal, now).map_err(|e| Fail::invalid(format!("bad packet: {}", e.0)))?;
    let verdict = match target {
        None => Evaluator::new(fw, &db)?.evaluate(&packet)?,
        Some(t) => {
            let (_, script) = backends::compile(fw, t, &db)?;
            Interpreter::new(&script)
                .and_then(|i| i.run(&packet, &Env::default()))
                .map_err(|e| Fail(EXIT_UNSUPPORTED, e.to_string()))?
        }
    };
    let _ = writeln!(ctx.out, "{verdict}");
    if !verdict.counters_hit.is_empty() {
        let c: Vec<String> = verdict.counters_hit.iter().map(u32::to_string).collect();
        let _ = writeln!(ctx.out, "counted by rule(s) {}", c.join(", "));
    }
    if verdict.egress != packet {
        let _ = writeln!(ctx.out, "translated to {}", verdict.egress);
    }
    Ok(())
}
