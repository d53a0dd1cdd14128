//! Command-line front end: file plumbing around the library pipeline.
//!
//! Exit codes: 0 success or verified, 1 usage or I/O error, 2 invalid model,
//! 3 infeasible or unverified. Failures print `error[<code>]: ...` on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use opacsyn::dot::{observer_dot, pmdp_dot};
use opacsyn::model::validate_assumptions;
use opacsyn::observer::check_cso;
use opacsyn::opacity::quantify_opacity;
use opacsyn::posy::valuation_from_json;
use opacsyn::sim::{default_max_steps, simulate_with, SimConfig};
use opacsyn::synthesis::{
    determinize_scheduler, synthesize, verify_solution, Scheduler, SolutionDoc, SynthesisOptions,
    SynthesisSpec, SynthesisStatus,
};
use opacsyn::{InsertionPmdp, InsertionPolicy, Observer, Psdes, SafeObserver, Valuation};

#[derive(Parser)]
#[command(name = "opacsyn", version, about = "Opacity-enforcing parameter and insertion synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the structural assumptions the pipeline relies on
    Validate {
        model: PathBuf,
        /// Valuations sampled for the parametric checks
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Build the observer and print the opacity verdict
    Observer {
        model: PathBuf,
        /// Write the observer as a DOT digraph
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Render the pruned (never-revealing) observer instead
        #[arg(long)]
        safe: bool,
    },
    /// Opacity level of the system at a fixed parameter valuation
    Quantify {
        model: PathBuf,
        /// JSON object of strictly positive parameter values
        #[arg(long)]
        valuation: PathBuf,
    },
    /// Build the insertion unfolding and print its statistics
    BuildPmdp {
        model: PathBuf,
        #[arg(long, default_value = "parsimonious")]
        policy: String,
        /// Write the unfolding as a DOT digraph
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Co-synthesize transition parameters and an insertion strategy
    Synthesize {
        model: PathBuf,
        /// Least acceptable opacity probability, in [0, 1]
        #[arg(long)]
        gamma: f64,
        /// Largest acceptable avoid-set probability, in [0, 1]
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value = "parsimonious")]
        policy: String,
        /// Write the solution document here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-verify a solution document against the model
    Verify {
        model: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Collapse the scheduler to its argmax choices and re-verify
    Determinize {
        model: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        /// Rewrite target; defaults to the solution path itself
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimate of the revelation and avoid-set probabilities
    Simulate {
        model: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        runs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Truncation cap per run; defaults to ten times the longest
        /// observable string
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write a DOT rendering of a pipeline artifact
    ExportDot {
        model: PathBuf,
        #[arg(long, value_parser = ["observer", "safe-observer", "pmdp"])]
        what: String,
        #[arg(long, default_value = "parsimonious")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

type Run<T> = Result<T, Failure>;

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

fn read(path: &Path) -> Run<String> {
    fs::read_to_string(path).map_err(|e| fail(1, format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Run<()> {
    fs::write(path, text).map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Run<Psdes> {
    Psdes::parse(&read(path)?).map_err(|e| fail(2, e.to_string()))
}

fn parse_policy(name: &str) -> Run<InsertionPolicy> {
    InsertionPolicy::from_name(name)
        .ok_or_else(|| fail(1, format!("unknown insertion policy {name}")))
}

fn build_pmdp(m: &Psdes, policy: InsertionPolicy) -> Run<InsertionPmdp> {
    InsertionPmdp::from_model(m, policy).map_err(|e| fail(2, e.to_string()))
}

fn load_solution(path: &Path, m: &Psdes) -> Run<SolutionDoc> {
    let doc = SolutionDoc::from_json(&read(path)?).map_err(|e| fail(1, e.to_string()))?;
    if !doc.model_digest.is_empty() && doc.model_digest != m.digest() {
        return Err(fail(
            1,
            format!(
                "solution was produced for a different model (digest {}, model has {})",
                doc.model_digest,
                m.digest()
            ),
        ));
    }
    Ok(doc)
}

fn deployment(doc: &SolutionDoc) -> Run<(InsertionPolicy, Valuation, Scheduler)> {
    let policy = doc.policy().map_err(|e| fail(1, e.to_string()))?;
    let valuation = doc.valuation().map_err(|e| fail(1, e.to_string()))?;
    let scheduler = doc
        .scheduler
        .clone()
        .ok_or_else(|| fail(1, "solution document carries no scheduler"))?;
    Ok((policy, valuation, scheduler))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Run<u8> {
    match cmd {
        Cmd::Validate { model, samples } => {
            if samples == 0 {
                return Err(fail(1, "--samples must be at least 1"));
            }
            let m = load_model(&model)?;
            let report = validate_assumptions(&m, samples);
            print!("{report}");
            if report.all_passed() {
                println!("model ok: {} states, {} events", m.n_states(), m.n_events());
                Ok(0)
            } else {
                Err(fail(2, "model violates a structural assumption"))
            }
        }
        Cmd::Observer { model, dot, safe } => {
            let m = load_model(&model)?;
            let obs = Observer::build(&m);
            let verdict = check_cso(&obs);
            if verdict.opaque {
                println!("opaque");
            } else {
                let witnesses: Vec<String> =
                    verdict.witnesses.iter().map(|w| obs.string_label(w)).collect();
                println!("not opaque; witnesses: {}", witnesses.join(", "));
            }
            if let Some(path) = dot {
                let text = if safe {
                    let pruned = SafeObserver::build(&obs).map_err(|e| fail(2, e.to_string()))?;
                    observer_dot(&pruned)
                } else {
                    observer_dot(&obs)
                };
                write(&path, &text)?;
            }
            Ok(0)
        }
        Cmd::Quantify { model, valuation } => {
            let m = load_model(&model)?;
            let v = valuation_from_json(&read(&valuation)?).map_err(|e| fail(1, e.to_string()))?;
            let rep = quantify_opacity(&m, &v).map_err(|e| fail(2, e.to_string()))?;
            println!("opacity probability:    {:.10}", rep.p_cso);
            println!("revelation probability: {:.10}", rep.p_reveal);
            match &rep.revealing_strings {
                Some(ws) if ws.is_empty() => println!("revealing strings: none"),
                Some(ws) => println!("revealing strings: {}", ws.join(", ")),
                None => println!("revealing strings: not finitely enumerable"),
            }
            println!("residual: {:.3e}", rep.residual);
            Ok(0)
        }
        Cmd::BuildPmdp { model, policy, dot } => {
            let policy = parse_policy(&policy)?;
            let m = load_model(&model)?;
            let pmdp = build_pmdp(&m, policy)?;
            println!("policy: {}", pmdp.policy().name());
            println!("states: {} ({} system, {} insertion)",
                pmdp.n_states(), pmdp.n_system_states(), pmdp.n_insertion_states());
            println!("blocked insertion states: {}", pmdp.sinks().len());
            let goals: Vec<&str> = pmdp.goals().iter().map(|&y| pmdp.system_label(y)).collect();
            println!("goal states: {}", goals.join(", "));
            if let Some(path) = dot {
                write(&path, &pmdp_dot(&pmdp))?;
            }
            Ok(0)
        }
        Cmd::Synthesize { model, gamma, lambda, policy, out } => {
            let policy = parse_policy(&policy)?;
            let spec = SynthesisSpec::new(gamma, lambda).map_err(|e| fail(1, e.to_string()))?;
            let m = load_model(&model)?;
            let opts = SynthesisOptions { policy, ..Default::default() };
            let r = synthesize(&m, &spec, &opts).map_err(|e| fail(2, e.to_string()))?;
            println!("status: {}", r.status);
            if let Some(obj) = r.objective {
                println!("objective: {obj:.6}");
            }
            if let Some(v) = &r.valuation {
                let parts: Vec<String> =
                    v.iter().map(|(p, x)| format!("{p} = {x:.6}")).collect();
                println!("valuation: {}", parts.join(", "));
            }
            if let Some(rep) = &r.verification {
                println!("{rep}");
            }
            if let Some(path) = out {
                write(&path, &SolutionDoc::from_result(&m, &spec, policy, &r).to_json())?;
                println!("solution written to {}", path.display());
            }
            match r.status {
                SynthesisStatus::Verified => Ok(0),
                _ => Err(fail(3, format!("synthesis ended {}: {}", r.status, r.detail))),
            }
        }
        Cmd::Verify { model, solution } => {
            let m = load_model(&model)?;
            let doc = load_solution(&solution, &m)?;
            let (policy, valuation, scheduler) = deployment(&doc)?;
            let pmdp = build_pmdp(&m, policy)?;
            let spec =
                SynthesisSpec::new(doc.gamma, doc.lambda).map_err(|e| fail(1, e.to_string()))?;
            let bounds = doc.root_bounds(&m, &pmdp);
            let rep = verify_solution(&m, &pmdp, &valuation, &scheduler, &spec, &bounds)
                .map_err(|e| fail(3, e.to_string()))?;
            println!("{rep}");
            if rep.passed {
                Ok(0)
            } else {
                Err(fail(3, "solution failed verification"))
            }
        }
        Cmd::Determinize { model, solution, out } => {
            let m = load_model(&model)?;
            let mut doc = load_solution(&solution, &m)?;
            let (policy, valuation, scheduler) = deployment(&doc)?;
            let pmdp = build_pmdp(&m, policy)?;
            let spec =
                SynthesisSpec::new(doc.gamma, doc.lambda).map_err(|e| fail(1, e.to_string()))?;
            let det = determinize_scheduler(&scheduler);
            let bounds = doc.root_bounds(&m, &pmdp);
            let rep = verify_solution(&m, &pmdp, &valuation, &det, &spec, &bounds)
                .map_err(|e| fail(3, e.to_string()))?;
            println!("{rep}");
            doc.scheduler = Some(det);
            doc.status = if rep.passed {
                SynthesisStatus::Verified.to_string()
            } else {
                SynthesisStatus::FeasibleUnverified.to_string()
            };
            doc.verification = Some(rep.clone());
            let target = out.unwrap_or(solution);
            write(&target, &doc.to_json())?;
            println!("determinized solution written to {}", target.display());
            if rep.passed {
                Ok(0)
            } else {
                Err(fail(3, "determinized scheduler failed verification"))
            }
        }
        Cmd::Simulate { model, solution, runs, seed, max_steps } => {
            let m = load_model(&model)?;
            let doc = load_solution(&solution, &m)?;
            let (policy, valuation, scheduler) = deployment(&doc)?;
            let pmdp = build_pmdp(&m, policy)?;
            let max_steps = max_steps.unwrap_or_else(|| default_max_steps(&Observer::build(&m)));
            let cfg = SimConfig::new(runs, seed, max_steps);
            let rep = simulate_with(&m, &pmdp, &valuation, &scheduler, &cfg)
                .map_err(|e| fail(3, e.to_string()))?;
            println!("{rep}");
            Ok(0)
        }
        Cmd::ExportDot { model, what, policy, out } => {
            let m = load_model(&model)?;
            let text = match what.as_str() {
                "observer" => observer_dot(&Observer::build(&m)),
                "safe-observer" => {
                    let obs = Observer::build(&m);
                    let pruned = SafeObserver::build(&obs).map_err(|e| fail(2, e.to_string()))?;
                    observer_dot(&pruned)
                }
                _ => pmdp_dot(&build_pmdp(&m, parse_policy(&policy)?)?),
            };
            write(&out, &text)?;
            Ok(0)
        }
    }
}
