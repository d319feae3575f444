use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use votecurve::error::Error;
use votecurve::estimation::{
    count_pmf, nonident_pair, plugin_bound, plugin_signature, prefix_from_pmf, signed_prefix,
    GroupedSample,
};
use votecurve::latent_law::{Figure1Curve, Law};
use votecurve::plurality::{plurality_accuracy, plurality_endpoint, CategoricalVector, PluralityMode};
use votecurve::quadrature::{GaussLegendre, QuadratureConfig, DEFAULT_GL_POINTS, DEFAULT_R_GRID};
use votecurve::shape_rates::{
    bridge_bound, classify_shape, endpoint_gap, near_zero_bound, oscillation_signs, rate_sharpness_probe,
    variation_bound, MarginCondition,
};
use votecurve::signature::{check_realizable, curve, prefix_to_increments, pushforward, recover_moments, SignedSignature, VotingCurve};
use votecurve::simulate::{mc_curve, simulate_counts, SimConfig, RNG_ALGORITHM};

/// Odd-budget majority-voting curves, signed voting signatures and their estimation.
#[derive(Parser, Debug)]
#[command(name = "votecurve", version, about)]
struct Cli {
    /// Number of u-uniform nodes in the radius grid used for densities.
    #[arg(long, global = true, default_value_t = DEFAULT_R_GRID)]
    r_grid: usize,

    /// Gauss-Legendre points per quadrature panel.
    #[arg(long, global = true, default_value_t = DEFAULT_GL_POINTS)]
    gl_points: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Odd-budget curve V_0..V_n of a latent law (CSV: n,votes,V).
    Curve {
        #[arg(long)]
        law: PathBuf,
        #[arg(long)]
        n_max: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Signed voting signature of a latent law (JSON).
    Signature {
        #[arg(long)]
        law: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Signed moments s_0..s_n recovered from a curve CSV (CSV: k,s).
    Recover {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Large-budget limit V_inf from a law or a signature.
    Endpoint(EndpointArgs),
    /// Bound evaluators against the actual curve of a law.
    Bounds(BoundsArgs),
    /// Shape class of a law's curve.
    Shape {
        #[arg(long)]
        law: PathBuf,
        /// Budget index up to which increments are reported.
        #[arg(long, default_value_t = 50)]
        n_max: u64,
    },
    /// Direction changes of the oscillation law at k_j = 3j 2^j.
    Oscillate {
        #[arg(long, default_value_t = 10)]
        j_max: u32,
    },
    /// Signed-moment prefix from grouped counts (CSV: example_id,count).
    Estimate {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        depth: u32,
        /// Also report the plug-in signature.
        #[arg(long)]
        plugin: bool,
    },
    /// Simulated grouped counts, or a Monte Carlo curve with --curve.
    Simulate {
        #[arg(long)]
        law: PathBuf,
        #[arg(long)]
        depth: u32,
        #[arg(long)]
        examples: u64,
        #[arg(long)]
        seed: u64,
        /// Emit the Monte Carlo curve up to this budget index instead of counts.
        #[arg(long, value_name = "N_MAX")]
        curve: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two laws with equal count distributions at depth J but different next moment.
    Nonident {
        #[arg(long)]
        depth: u32,
        /// Directory for law1.json, law2.json and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plurality accuracy of a categorical vector (class 0 correct).
    Plurality {
        /// Comma-separated class probabilities.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        p: Vec<f64>,
        #[arg(long)]
        m: u64,
        /// Monte Carlo replicates instead of exact enumeration.
        #[arg(long, value_name = "REPS")]
        mc: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Curves of the five gallery laws with V_0 = 3/4.
    Figure1 {
        #[arg(long, default_value_t = 100)]
        n_max: u64,
        /// Directory for one CSV per law; stdout gets a combined CSV otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct EndpointArgs {
    #[arg(long)]
    law: Option<PathBuf>,
    #[arg(long)]
    signature: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BoundKind {
    Variation,
    NearZero,
    Bridge,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    law: PathBuf,
    #[arg(long, value_enum)]
    kind: BoundKind,
    #[arg(long = "C", value_name = "C")]
    c: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long, default_value_t = 100)]
    n_max: u64,
    /// With --kind bridge: also fit the decay rate of the worst-case law.
    #[arg(long)]
    probe: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let infeasible = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_infeasibility));
            ExitCode::from(if infeasible { 3 } else { 2 })
        }
    }
}

struct Ctx {
    quad: QuadratureConfig,
}

impl Ctx {
    fn gl(&self) -> GaussLegendre {
        GaussLegendre::new(self.quad.gl_points)
    }

    fn meta(&self, seed: Option<u64>) -> Value {
        json!({
            "tool": "votecurve",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "quadrature": { "r_grid": self.quad.r_grid, "gl_points": self.quad.gl_points },
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.gl_points == 0 || cli.gl_points > 64 {
        bail!("--gl-points must be between 1 and 64");
    }
    if cli.r_grid < 2 {
        bail!("--r-grid must be at least 2");
    }
    let ctx = Ctx {
        quad: QuadratureConfig { r_grid: cli.r_grid, gl_points: cli.gl_points },
    };
    match cli.command {
        Command::Curve { law, n_max, out } => {
            let law = read_law(&law)?;
            emit(out.as_deref(), &curve(&law, n_max, &ctx.quad)?.to_csv())
        }
        Command::Signature { law, out } => {
            let sig = pushforward(&read_law(&law)?, &ctx.quad);
            let mut v = serde_json::to_value(&sig)?;
            v["meta"] = ctx.meta(None);
            emit_json(out.as_deref(), &v)
        }
        Command::Recover { curve, out } => {
            let file = fs::File::open(&curve).with_context(|| format!("cannot open curve file {}", curve.display()))?;
            let c = VotingCurve::read_csv(BufReader::new(file))
                .with_context(|| format!("invalid curve file {}", curve.display()))?;
            let mut csv = String::from("k,s\n");
            for (k, s) in recover_moments(&c).s.iter().enumerate() {
                csv.push_str(&format!("{k},{s:.16e}\n"));
            }
            emit(out.as_deref(), &csv)
        }
        Command::Endpoint(a) => endpoint(&ctx, a),
        Command::Bounds(a) => bounds(&ctx, a),
        Command::Shape { law, n_max } => {
            let law = read_law(&law)?;
            let sig = pushforward(&law, &ctx.quad);
            let c = curve(&law, n_max, &ctx.quad)?;
            let inc = c.increments();
            let changes = inc
                .iter()
                .filter(|d| d.abs() > 1e-15)
                .collect::<Vec<_>>()
                .windows(2)
                .filter(|w| w[0].signum() != w[1].signum())
                .count();
            emit_json(
                None,
                &json!({
                    "meta": ctx.meta(None),
                    "shape": classify_shape(&sig),
                    "increments": inc,
                    "sign_changes": changes,
                }),
            )
        }
        Command::Oscillate { j_max } => {
            let signs = oscillation_signs(j_max, &ctx.quad)?;
            emit_json(None, &json!({ "meta": ctx.meta(None), "signs": signs }))
        }
        Command::Estimate { counts, depth, plugin } => {
            let file = fs::File::open(&counts).with_context(|| format!("cannot open counts file {}", counts.display()))?;
            let sample = GroupedSample::read_csv(BufReader::new(file), depth)
                .with_context(|| format!("invalid counts file {}", counts.display()))?;
            let prefix = signed_prefix(&sample);
            let mut v = json!({
                "meta": ctx.meta(None),
                "prefix": prefix,
                "std_errors": prefix.std_errors(),
                "increments": prefix_to_increments(&prefix)
                    .into_iter()
                    .map(|(k, d)| json!({ "k": k, "increment": d }))
                    .collect::<Vec<_>>(),
            });
            if plugin {
                v["plugin_signature"] = serde_json::to_value(plugin_signature(&sample))?;
                v["plugin_bound_phi_r"] = json!(plugin_bound(0.25, 1.0, sample.n_examples() as u64, depth));
            }
            emit_json(None, &v)
        }
        Command::Simulate { law, depth, examples, seed, curve: n_max, out } => {
            let law = read_law(&law)?;
            let cfg = SimConfig::new(seed, examples, depth)?;
            let csv = match n_max {
                None => simulate_counts(&law, &cfg)?.to_csv(),
                Some(n_max) => {
                    let mc = mc_curve(&law, n_max, &cfg)?;
                    let mut s = String::from("n,votes,V,stderr,n_examples,seed\n");
                    for (n, (v, se)) in mc.values.iter().zip(&mc.std_errors).enumerate() {
                        s.push_str(&format!("{n},{},{v:.16e},{se:.16e},{examples},{seed}\n", 2 * n + 1));
                    }
                    s
                }
            };
            emit(out.as_deref(), &csv)?;
            if let Some(path) = out {
                let mut meta = ctx.meta(Some(seed));
                meta["rng"] = json!(RNG_ALGORITHM);
                meta["n_examples"] = json!(examples);
                meta["repeat_depth"] = json!(depth);
                emit_json(Some(&sidecar(&path)), &json!({ "meta": meta }))?;
            }
            Ok(())
        }
        Command::Nonident { depth, out } => nonident(&ctx, depth, out.as_deref()),
        Command::Plurality { p, m, mc, seed } => {
            let p = CategoricalVector::new(p)?;
            let mode = match mc {
                Some(reps) => PluralityMode::MonteCarlo { seed, reps },
                None => PluralityMode::Exact,
            };
            let est = plurality_accuracy(&p, m, mode)?;
            let mut meta = ctx.meta(mc.map(|_| seed));
            if mc.is_some() {
                meta["rng"] = json!("chacha8/seed_from_u64(seed)/stream=block_id");
            }
            emit_json(
                None,
                &json!({
                    "meta": meta,
                    "p": p.probs(),
                    "m": m,
                    "mode": mode,
                    "accuracy": est.value,
                    "std_error": est.std_error,
                    "endpoint": plurality_endpoint(&p),
                }),
            )
        }
        Command::Figure1 { n_max, out } => {
            let curves: Vec<(Figure1Curve, VotingCurve)> = Figure1Curve::ALL
                .iter()
                .map(|&f| Ok((f, curve(&Law::Discrete(f.law()), n_max, &ctx.quad)?)))
                .collect::<Result<_>>()?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
                    for (f, c) in &curves {
                        emit(Some(&dir.join(format!("{}.csv", f.slug()))), &c.to_csv())?;
                    }
                    Ok(())
                }
                None => {
                    let mut s = String::from("curve,n,votes,V\n");
                    for (f, c) in &curves {
                        for (n, v) in c.values.iter().enumerate() {
                            s.push_str(&format!("{},{n},{},{v:.16e}\n", f.slug(), 2 * n + 1));
                        }
                    }
                    emit(None, &s)
                }
            }
        }
    }
}

fn endpoint(ctx: &Ctx, a: EndpointArgs) -> Result<()> {
    let v = match (a.law, a.signature) {
        (Some(path), _) => {
            let law = read_law(&path)?;
            let sig = pushforward(&law, &ctx.quad);
            json!({
                "meta": ctx.meta(None),
                "endpoint": law.endpoint(),
                "signature_endpoint": sig.endpoint()?,
            })
        }
        (None, Some(path)) => {
            let text = read_text(&path)?;
            let sig = SignedSignature::from_json(&text).with_context(|| format!("invalid signature file {}", path.display()))?;
            sig.validate()?;
            let chk = check_realizable(&sig);
            if !chk.feasible {
                return Err(Error::Infeasible(format!(
                    "signature is not realizable by any latent law (slack {:.6e})",
                    chk.slack
                ))
                .into());
            }
            json!({ "meta": ctx.meta(None), "endpoint": sig.endpoint()?, "realizability_slack": chk.slack })
        }
        (None, None) => bail!("pass --law FILE or --signature FILE"),
    };
    emit_json(None, &v)
}

fn bounds(ctx: &Ctx, a: BoundsArgs) -> Result<()> {
    let law = read_law(&a.law)?;
    let sig = pushforward(&law, &ctx.quad);
    let tv = sig.total_variation();
    let gl = ctx.gl();
    let mut v = json!({ "meta": ctx.meta(None), "kind": format!("{:?}", a.kind).to_lowercase(), "tv": tv });
    match a.kind {
        BoundKind::Variation => {
            if a.n_max == 0 {
                bail!("--n-max must be >= 1 for the variation bound");
            }
            let c = curve(&law, a.n_max, &ctx.quad)?.values;
            let m = a.n_max;
            let rows: Vec<Value> = (0..m)
                .map(|n| {
                    let b = variation_bound(tv, n, m)?;
                    Ok(json!({
                        "n": n, "m": m,
                        "sum_form": b.sum_form, "closed_form": b.closed_form,
                        "observed": (c[m as usize] - c[n as usize]).abs(),
                    }))
                })
                .collect::<Result<_>>()?;
            v["rows"] = json!(rows);
        }
        BoundKind::NearZero => {
            let Some(a_val) = a.a else { bail!("--kind near-zero needs --a") };
            let support = sig
                .atoms
                .iter()
                .map(|x| x.r)
                .chain(sig.g_nodes.iter().zip(&sig.g_values).filter(|(_, g)| **g != 0.0).map(|(r, _)| *r))
                .fold(0.0, f64::max);
            if support > a_val {
                bail!("signature reaches r = {support}, outside [0, a] with a = {a_val}");
            }
            let rows: Vec<Value> = (0..=a.n_max)
                .map(|n| {
                    Ok(json!({
                        "n": n,
                        "bound": near_zero_bound(tv, a_val, n)?,
                        "observed_endpoint_gap": endpoint_gap(&law, n, &gl).abs(),
                    }))
                })
                .collect::<Result<_>>()?;
            v["rows"] = json!(rows);
        }
        BoundKind::Bridge => {
            let (Some(c), Some(kappa), Some(t0)) = (a.c, a.kappa, a.t0) else {
                bail!("--kind bridge needs --C, --kappa and --t0");
            };
            let cond = MarginCondition::new(c, kappa, t0)?;
            let holds = (1..200).all(|j| {
                let t = t0 * j as f64 / 200.0;
                law.margin_mass(t) <= c * t.powf(kappa) + 1e-12
            });
            v["margin_condition_holds"] = json!(holds);
            let rows: Vec<Value> = (0..=a.n_max)
                .map(|n| {
                    json!({
                        "n": n,
                        "bound": bridge_bound(&cond, n),
                        "observed_endpoint_gap": endpoint_gap(&law, n, &gl).abs(),
                    })
                })
                .collect();
            v["rows"] = json!(rows);
            if a.probe {
                let budgets: Vec<u64> = (3..=12).map(|k| 1u64 << (k - 1)).collect();
                let probe = rate_sharpness_probe(&cond, &budgets, &ctx.quad)?;
                v["meta"]["smallest_votes_used"] = json!(probe.smallest_votes_used);
                v["probe"] = serde_json::to_value(probe)?;
            }
        }
    }
    emit_json(None, &v)
}

fn nonident(ctx: &Ctx, depth: u32, out: Option<&Path>) -> Result<()> {
    let pair = nonident_pair(depth)?;
    let gl = ctx.gl();
    let l1 = Law::Discrete(pair.law1.clone());
    let l2 = Law::Discrete(pair.law2.clone());
    let (p1, p2) = (count_pmf(&l1, depth, &gl), count_pmf(&l2, depth, &gl));
    let k = pair.k_witness as u32;
    let (s1, s2) = (pushforward(&l1, &ctx.quad), pushforward(&l2, &ctx.quad));
    let report = json!({
        "meta": ctx.meta(None),
        "depth": depth,
        "count_pmf_1": p1,
        "count_pmf_2": p2,
        "max_pmf_difference": p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        "identified_prefix_1": prefix_from_pmf(&p1, depth),
        "identified_prefix_2": prefix_from_pmf(&p2, depth),
        "k_witness": pair.k_witness,
        "s_witness_1": s1.moment(k, &gl),
        "s_witness_2": s2.moment(k, &gl),
        "witness_gap": pair.witness_gap,
        "support": pair.support,
        "epsilon": pair.epsilon,
    });
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            emit_json(Some(&dir.join("law1.json")), &l1.to_json())?;
            emit_json(Some(&dir.join("law2.json")), &l2.to_json())?;
            emit_json(Some(&dir.join("report.json")), &report)
        }
        None => emit_json(None, &json!({ "law1": l1.to_json(), "law2": l2.to_json(), "report": report })),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_law(path: &Path) -> Result<Law> {
    let text = read_text(path)?;
    let law = Law::from_json(&text).with_context(|| format!("invalid law file {}", path.display()))?;
    law.validate().with_context(|| format!("invalid law file {}", path.display()))?;
    Ok(law)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn emit_json(out: Option<&Path>, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    emit(out, &text)
}
