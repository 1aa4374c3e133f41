use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use droopstab::certificates::QChoices;
use droopstab::conditions::{analyze, Verdict};
use droopstab::equilibrium::{find_equilibrium, flat_start, load_point};
use droopstab::export::{eigenvalues_csv, format_scalar, matrix_csv, read_matrix_csv};
use droopstab::ieee13::build_ieee13;
use droopstab::linalg::spectral_abscissa;
use droopstab::linearize::jacobian;
use droopstab::simulator::{
    random_perturbation, simulate_linear, simulate_nonlinear, state_header,
};
use droopstab::{Analysis, AnalyzeOptions, GridSpec, Matrix, OperatingPoint, StabilityReport, StepControl};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::{
    AnalyzeArgs, CertArgs, Cli, ExportArgs, Format, GenArgs, SimulateArgs, SpecArgs, SweepArgs,
};

fn parse_gains(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let vals = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("--{what}: expected a number or a comma list, got {s:?}"))?;
    match vals.len() {
        1 => Ok(vec![vals[0]; n]),
        len if len == n => Ok(vals),
        len => bail!("--{what}: {len} values given for {n} inverters"),
    }
}

pub fn load_spec(args: &SpecArgs) -> Result<GridSpec> {
    let mut spec = GridSpec::from_path(&args.spec)
        .with_context(|| format!("spec: reading {}", args.spec.display()))?;
    let n = spec.n_inverters();
    if let Some(kp) = &args.kp {
        for (inv, k) in spec.inverters.iter_mut().zip(parse_gains(kp, n, "kp")?) {
            inv.k_p = k;
        }
    }
    if let Some(kq) = &args.kq {
        for (inv, k) in spec.inverters.iter_mut().zip(parse_gains(kq, n, "kq")?) {
            inv.k_q = k;
        }
    }
    spec.validate().context("spec")?;
    Ok(spec)
}

fn load_q(choice: &str) -> Result<Option<Matrix>> {
    if choice == "identity" {
        return Ok(None);
    }
    let file = fs::File::open(choice).with_context(|| format!("opening Q matrix {choice}"))?;
    Ok(Some(read_matrix_csv(BufReader::new(file)).with_context(|| format!("parsing Q matrix {choice}"))?))
}

fn options(spec: &SpecArgs, cert: &CertArgs) -> Result<AnalyzeOptions> {
    let mut opts = AnalyzeOptions {
        q: QChoices {
            slow: load_q(&cert.q_slow)?,
            fast: load_q(&cert.q_fast)?,
            xi: load_q(&cert.q_xi)?,
        },
        eps1_policy: cert.eps1_policy,
        ..Default::default()
    };
    if let Some(tol) = cert.hurwitz_tol {
        opts.hurwitz_tol = tol;
    }
    if let Some(tol) = spec.equilibrium_tol {
        opts.equilibrium_tol = tol;
    }
    if let Some(path) = &spec.initial {
        opts.initial_guess = Some(load_point(path).context("equilibrium: reading initial point")?);
    }
    Ok(opts)
}

fn report_json(report: &StabilityReport, seed: u64) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(map) = &mut v {
        map.insert("seed".into(), json!(seed));
    }
    Ok(serde_json::to_string_pretty(&v)?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}"))
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn render_table(r: &StabilityReport, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "grid             {} inverters, {} lines (spec {})", r.n_inverters, r.n_lines, r.spec_fingerprint);
    let _ = writeln!(s, "equilibrium      {} Newton steps, scaled residual {:.2e}", r.equilibrium.iterations, r.equilibrium.residual_norm);
    let _ = writeln!(s, "E Hurwitz        {} (abscissa {:.6})", yes(r.hurwitz_e.flag), r.hurwitz_e.spectral_abscissa);
    match &r.hurwitz_slow {
        Some(h) => {
            let _ = writeln!(s, "A_slow Hurwitz   {} (abscissa {:.6})", yes(h.flag), h.spectral_abscissa);
        }
        None => {
            let _ = writeln!(s, "A_slow Hurwitz   n/a");
        }
    }
    let _ = writeln!(s, "A Hurwitz        {} (abscissa {:.6})", yes(r.hurwitz_full.flag), r.hurwitz_full.spectral_abscissa);
    for z in &r.dominant_full {
        let _ = writeln!(s, "  eig(A)         {:.6} {:+.6}i", z[0], z[1]);
    }
    let _ = writeln!(s, "eps1             {:.4e}  (eps1* {})", r.eps1, opt(r.eps1_star));
    let _ = writeln!(s, "eps2             {:.4e}", r.eps2);
    let _ = writeln!(s, "eps3             {:.4e}  (eps3* {}, at actual eps1 {})", r.eps3, opt(r.eps3_star), opt(r.eps3_star_at_actual_eps1));
    let _ = writeln!(s, "verdict reduced  {}", yes(r.verdict_reduced));
    let _ = writeln!(s, "verdict full     {}", yes(r.verdict_full));
    if r.conditions_conservative {
        let _ = writeln!(s, "note             A is Hurwitz but the bounds are not met");
    }
    if let Some(e) = &r.certificate_error {
        let _ = writeln!(s, "certificate      {e}");
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning          {w}");
    }
    let verdict = match r.verdict {
        Verdict::Certified => "certified",
        Verdict::ConditionsFail => "stable, not certified",
        Verdict::Unstable => "unstable",
    };
    let _ = writeln!(s, "verdict          {verdict} (exit {}, seed {seed})", r.exit_code());
    s
}

fn summary_csv(r: &StabilityReport, seed: u64) -> String {
    let f = |x: Option<f64>| x.map(format_scalar).unwrap_or_default();
    format!(
        "verdict,exit_code,abscissa_e,abscissa_slow,abscissa_full,eps1,eps1_star,eps3,eps3_star,seed\n{:?},{},{},{},{},{},{},{},{},{}\n",
        r.verdict,
        r.exit_code(),
        format_scalar(r.hurwitz_e.spectral_abscissa),
        f(r.hurwitz_slow.as_ref().map(|h| h.spectral_abscissa)),
        format_scalar(r.hurwitz_full.spectral_abscissa),
        format_scalar(r.eps1),
        f(r.eps1_star),
        format_scalar(r.eps3),
        f(r.eps3_star),
        seed
    )
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_spectra(dir: &Path, a: &Analysis) -> Result<()> {
    write_file(dir, "eig_E.csv", &eigenvalues_csv(&a.eig_e))?;
    write_file(dir, "eig_A_slow.csv", &eigenvalues_csv(&a.eig_slow))?;
    write_file(dir, "eig_A.csv", &eigenvalues_csv(&a.eig_full))
}

pub fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<i32> {
    let spec = load_spec(&args.spec)?;
    let opts = options(&args.spec, &args.cert)?;
    let a = analyze(&spec, &opts)?;
    let json = report_json(&a.report, cli.seed)?;
    let table = render_table(&a.report, cli.seed);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_file(dir, "report.json", &json)?;
        write_file(dir, "report.txt", &table)?;
        write_spectra(dir, &a)?;
    }
    let out = match cli.format {
        Format::Table => table,
        Format::Json => json + "\n",
        Format::Csv => summary_csv(&a.report, cli.seed),
    };
    io::stdout().write_all(out.as_bytes())?;
    Ok(a.report.exit_code())
}

pub fn cmd_export(cli: &Cli, args: &ExportArgs) -> Result<i32> {
    let spec = load_spec(&args.spec)?;
    let opts = options(&args.spec, &args.cert)?;
    let a = analyze(&spec, &opts)?;
    let dir = &args.out;
    fs::create_dir_all(dir)?;
    let b = &a.blocks;
    let r = &a.reduced;
    let matrices: [(&str, &Matrix); 13] = [
        ("A.csv", &a.jacobian),
        ("A_xz.csv", &b.a_xz),
        ("A_zz.csv", &b.a_zz),
        ("A_zx.csv", &b.a_zx),
        ("A_zy.csv", &b.a_zy),
        ("A_yz.csv", &b.a_yz),
        ("A_yx.csv", &b.a_yx),
        ("A_yy.csv", &b.a_yy),
        ("A_zz_tilde.csv", &r.azz_tilde),
        ("Gamma0.csv", &r.gamma0),
        ("A_slow.csv", &r.a_slow),
        ("E.csv", &r.e_matrix),
        ("E_closed_form.csv", &a.e_closed_form),
    ];
    for (name, m) in matrices {
        write_file(dir, name, &matrix_csv(m))?;
    }
    write_spectra(dir, &a)?;
    write_file(dir, "equilibrium.json", &a.equilibrium.to_json_pretty()?)?;
    write_file(dir, "spec.json", &spec.to_json_pretty()?)?;
    write_file(dir, "report.json", &report_json(&a.report, cli.seed)?)?;
    if cli.format != Format::Json {
        eprintln!("wrote {} files to {}", matrices.len() + 6, dir.display());
    }
    Ok(0)
}

pub fn cmd_ieee13(args: &GenArgs) -> Result<i32> {
    if !(args.kq > 0.0 && args.kp > 0.0) {
        bail!("gains must be positive");
    }
    let json = build_ieee13(args.kq, args.kp).to_json_pretty()? + "\n";
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        }
        None => io::stdout().write_all(json.as_bytes())?,
    }
    Ok(0)
}

struct SweepRow {
    k_p: f64,
    k_q: f64,
    verdict: Option<Verdict>,
    abscissa: [Option<f64>; 3],
    eps1_star: Option<f64>,
    eps3_star: Option<f64>,
    error: Option<String>,
}

fn sweep_point(spec: &GridSpec, opts: &AnalyzeOptions, k_p: f64, k_q: f64) -> SweepRow {
    let s = spec.clone().with_gains(k_p, k_q);
    match analyze(&s, opts) {
        Ok(a) => {
            let r = a.report;
            SweepRow {
                k_p,
                k_q,
                verdict: Some(r.verdict),
                abscissa: [
                    Some(r.hurwitz_e.spectral_abscissa),
                    r.hurwitz_slow.map(|h| h.spectral_abscissa),
                    Some(r.hurwitz_full.spectral_abscissa),
                ],
                eps1_star: r.eps1_star,
                eps3_star: r.eps3_star,
                error: None,
            }
        }
        Err(e) => SweepRow {
            k_p,
            k_q,
            verdict: None,
            abscissa: [None; 3],
            eps1_star: None,
            eps3_star: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<i32> {
    let spec = load_spec(&args.spec)?;
    let opts = options(&args.spec, &args.cert)?;
    let points: Vec<(f64, f64)> = args
        .kp_values
        .iter()
        .flat_map(|&kp| args.kq_values.iter().map(move |&kq| (kp, kq)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build()?;
    let rows: Vec<SweepRow> =
        pool.install(|| points.par_iter().map(|&(kp, kq)| sweep_point(&spec, &opts, kp, kq)).collect());

    let f = |x: Option<f64>| x.map(format_scalar).unwrap_or_default();
    let mut csv = String::from(
        "k_p,k_q,verdict,exit_code,abscissa_e,abscissa_slow,abscissa_full,eps1_star,eps3_star,seed,error\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            format_scalar(r.k_p),
            format_scalar(r.k_q),
            r.verdict.map(|v| format!("{v:?}")).unwrap_or_else(|| "Error".into()),
            r.verdict.map_or(1, |v| v.exit_code()),
            f(r.abscissa[0]),
            f(r.abscissa[1]),
            f(r.abscissa[2]),
            f(r.eps1_star),
            f(r.eps3_star),
            cli.seed,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_file(dir, "sweep.csv", &csv)?;
        }
        None => io::stdout().write_all(csv.as_bytes())?,
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep points failed", rows.len());
    }
    Ok(0)
}

pub fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<i32> {
    let spec = load_spec(&args.spec)?;
    let guess = match &args.spec.initial {
        Some(p) => load_point(p).context("equilibrium: reading initial point")?,
        None => flat_start(&spec).context("equilibrium")?,
    };
    let tol = args.spec.equilibrium_tol.unwrap_or(droopstab::equilibrium::DEFAULT_TOL);
    let eq = find_equilibrium(&spec, &guess, tol, droopstab::equilibrium::DEFAULT_MAX_ITER)
        .context("equilibrium")?;
    if !eq.converged {
        bail!("equilibrium: Newton did not converge (scaled residual {:e})", eq.residual_norm);
    }
    let (n, m) = (spec.n_inverters(), spec.n_lines());
    let header = state_header(n, m);
    let w0 = eq.point.to_vector();
    let dw = if args.random_direction {
        random_perturbation(w0.len(), args.perturb, cli.seed)
    } else {
        let k = header
            .iter()
            .position(|h| *h == args.perturb_state)
            .with_context(|| format!("unknown state {:?}; expected one of {}", args.perturb_state, header.join(",")))?;
        let mut d = droopstab::Vector::zeros(w0.len());
        d[k] = args.perturb;
        d
    };
    let ctrl = StepControl {
        rtol: args.rtol,
        atol: args.atol,
        output_dt: args.output_dt,
        ..Default::default()
    };
    let mut traj = if args.linear {
        let a = jacobian(&spec, &eq.point)?;
        let mut t = simulate_linear(&a, dw.as_slice(), args.horizon, &ctrl)?;
        for s in &mut t.states {
            *s += &w0;
        }
        t.meta.spec_hash = Some(spec.fingerprint());
        t
    } else {
        let x0 = OperatingPoint::from_vector(n, m, &(&w0 + &dw))?;
        simulate_nonlinear(&spec, &x0, args.horizon, &ctrl)?
    };
    traj.meta.seed = Some(cli.seed);
    if args.horizon == 0.0 {
        traj.times.clear();
        traj.states.clear();
    }
    let mut csv = Vec::new();
    traj.write_csv(&mut csv, &header)?;
    let meta = json!({
        "seed": cli.seed,
        "model": if args.linear { "linear" } else { "nonlinear" },
        "horizon": args.horizon,
        "perturbation": dw.as_slice(),
        "equilibrium": eq.point,
        "integrator": traj.meta,
        "samples": traj.times.len(),
    });
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("trajectory.csv"), &csv)?;
            write_file(dir, "trajectory.json", &serde_json::to_string_pretty(&meta)?)?;
        }
        None => io::stdout().write_all(&csv)?,
    }
    if let Some(reason) = &traj.meta.aborted {
        bail!("simulation aborted: {reason}");
    }
    if let (Some(first), Some(last)) = (traj.states.first(), traj.states.last()) {
        log::info!(
            "deviation {:e} -> {:e}; abscissa of A {:e}",
            (first - &w0).norm(),
            (last - &w0).norm(),
            spectral_abscissa(&jacobian(&spec, &eq.point)?)?
        );
    }
    Ok(0)
}
