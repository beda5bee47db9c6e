use serde::Serialize;

use contdrop::dynamics::{
    expected_dropout_error_linear, expected_gradient_linear, mc_dropout_error_linear, mc_expected_gradient,
    mc_sigmoid_regularizer, sigmoidal_regularizer, ErrorDecomposition, GradientEstimate, SigmoidRegularizer,
    UnitModel,
};
use contdrop::rng::streams;
use contdrop::statics::{
    approximation_error_grid, compare_reports, default_approximation_grid, linear_output_moments_with,
    mc_output_moments, random_layer, Agreement, ApproximationPoint, MomentReport, SigmoidParams,
};
use contdrop::verify::{random_unit, run_all, CheckResult, VerifyConfig};
use contdrop::{MaskDistribution, MomentMode, RngStream};

use crate::output::{ensure_dir, slug, write_json, write_text};
use crate::{CliResult, DynamicArgs, Failure, Format, StaticArgs, VerifyArgs};

fn default_laws(with_uniform: bool) -> Vec<MaskDistribution> {
    let mut v = vec![MaskDistribution::BERNOULLI_HALF];
    if with_uniform {
        v.push(MaskDistribution::Uniform);
    }
    v.push(MaskDistribution::gaussian(0.5, 0.2).expect("valid law"));
    v
}

#[derive(Serialize)]
struct StaticReport {
    weights: Vec<Vec<f64>>,
    input: Vec<f64>,
    closed_form: MomentReport,
    monte_carlo: MomentReport,
    agreement: Agreement,
}

fn moments_csv(closed: &MomentReport, mc: &MomentReport) -> String {
    let mut out = String::from("quantity,i,l,closed_form,monte_carlo,standard_error\n");
    let mean_se = mc.expected_standard_error.as_deref().unwrap_or_default();
    for (i, (c, m)) in closed.expected.iter().zip(&mc.expected).enumerate() {
        out.push_str(&format!("mean,{i},{i},{c},{m},{}\n", mean_se.get(i).copied().unwrap_or(f64::NAN)));
    }
    let cov_se = mc.standard_error.as_deref().unwrap_or_default();
    for i in 0..closed.covariance.len() {
        for l in i..closed.covariance.len() {
            let se = cov_se.get(i).and_then(|r| r.get(l)).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(
                "covariance,{i},{l},{},{},{se}\n",
                closed.covariance[i][l], mc.covariance[i][l]
            ));
        }
    }
    out
}

fn approximation_csv(points: &[ApproximationPoint]) -> String {
    let mut out = String::from("mu,var,approximation,quadrature,abs_error\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.mu, p.var, p.approximation, p.quadrature, p.abs_error));
    }
    out
}

pub fn analyze_static(a: StaticArgs) -> CliResult {
    if a.inputs == 0 || a.units == 0 {
        return Err(Failure::Invalid("--inputs and --units must be positive".into()));
    }
    let dir = ensure_dir(&a.common.out_dir)?;
    let laws = if a.dropout.is_empty() { default_laws(true) } else { a.dropout.clone() };
    let root = RngStream::new(a.common.seed, streams::ANALYSIS).substream(100);
    let (w, x) = random_layer(&mut root.generator(), a.units, a.inputs);
    for (li, law) in laws.iter().enumerate() {
        let closed = linear_output_moments_with(w.view(), &x, law, MomentMode::from(a.mode))?;
        let monte_carlo = mc_output_moments(w.view(), &x, law, a.samples, &root.substream(1 + li as u64))?;
        let agreement = compare_reports(&closed, &monte_carlo)?;
        println!(
            "{law}: max |z| mean {:.2}, covariance {:.2} over {} entries",
            agreement.max_z_expected, agreement.max_z_covariance, agreement.entries
        );
        if a.common.format == Format::Csv {
            write_text(&dir, &format!("static_{}.csv", slug(&law.to_string())), &moments_csv(&closed, &monte_carlo))?;
        }
        let report = StaticReport {
            weights: w.outer_iter().map(|r| r.to_vec()).collect(),
            input: x.clone(),
            closed_form: closed,
            monte_carlo,
            agreement,
        };
        write_json(&dir, &format!("static_{}.json", slug(&law.to_string())), &report)?;
    }
    let (mus, vars) = default_approximation_grid();
    let grid = approximation_error_grid(&mus, &vars, SigmoidParams::default())?;
    let worst = grid.iter().map(|p| p.abs_error).fold(0.0, f64::max);
    println!("sigmoid approximation: max |error| {worst:.4} over {} points", grid.len());
    write_text(&dir, "sigmoid_approximation.csv", &approximation_csv(&grid))?;
    Ok(())
}

#[derive(Serialize)]
struct UnitRecord {
    w: Vec<f64>,
    input: Vec<f64>,
    target: f64,
    decomposition: ErrorDecomposition,
    gradient_closed_form: Vec<f64>,
    gradient_monte_carlo: GradientEstimate,
    max_gradient_z: f64,
    sigmoid_regularizer: SigmoidRegularizer,
    /// Monte-Carlo `E[E_D] - E_ENS` for a sigmoid unit with relative entropy.
    sigmoid_gap_monte_carlo: f64,
    sigmoid_gap_standard_error: f64,
}

#[derive(Serialize)]
struct DynamicReport {
    distribution: MaskDistribution,
    mode: MomentMode,
    n_samples: usize,
    max_error_z: f64,
    max_gradient_z: f64,
    units: Vec<UnitRecord>,
}

fn z(mean: f64, se: f64, want: f64) -> f64 {
    let d = mean - want;
    if d == 0.0 {
        0.0
    } else {
        (d / se).abs()
    }
}

pub fn analyze_dynamic(a: DynamicArgs) -> CliResult {
    if a.instances == 0 || a.max_dim == 0 {
        return Err(Failure::Invalid("--instances and --max-dim must be positive".into()));
    }
    let dir = ensure_dir(&a.common.out_dir)?;
    let laws = if a.dropout.is_empty() { default_laws(false) } else { a.dropout.clone() };
    let mode = MomentMode::from(a.mode);
    let params = SigmoidParams::default();
    let root = RngStream::new(a.common.seed, streams::ANALYSIS).substream(200);
    let mut csv = String::from(
        "distribution,instance,n,target,e_ens,regularizer,predicted_e_d,mc_e_d,mc_standard_error,z,\
         max_gradient_z,sigmoid_continuous,sigmoid_bernoulli,sigmoid_mc,sigmoid_mc_standard_error\n",
    );
    for (li, law) in laws.iter().enumerate() {
        let mut g = root.generator();
        let law_root = root.substream(1 + li as u64);
        let mut units = Vec::with_capacity(a.instances);
        for inst in 0..a.instances {
            let (w, x, t) = random_unit(&mut g, a.max_dim);
            let s = law_root.substream(inst as u64);
            let d = expected_dropout_error_linear(&w, &x, t, law, mode)?;
            let (m, se) = mc_dropout_error_linear(&w, &x, t, law, a.samples, &s.substream(0))?;
            let d = d.with_mc(m, se);
            let g_closed = expected_gradient_linear(&w, &x, t, law, mode)?;
            let g_mc =
                mc_expected_gradient(&w, &x, t, law, UnitModel::LinearQuadratic, a.samples, &s.substream(1))?;
            let max_gradient_z = (0..w.len())
                .map(|i| z(g_mc.mean[i], g_mc.standard_error[i], g_closed[i]))
                .fold(0.0, f64::max);
            let reg = sigmoidal_regularizer(&w, &x, law, params, mode)?;
            let (gap, gap_se) = mc_sigmoid_regularizer(&w, &x, law, params, a.samples, &s.substream(2))?;
            csv.push_str(&format!(
                "{law},{inst},{},{t},{},{},{},{m},{se},{},{max_gradient_z},{},{},{gap},{gap_se}\n",
                w.len(),
                d.e_ens,
                d.regularizer,
                d.predicted_e_d,
                d.z_score().map_or(f64::NAN, f64::abs),
                reg.continuous,
                reg.bernoulli,
            ));
            units.push(UnitRecord {
                w,
                input: x,
                target: t,
                decomposition: d,
                gradient_closed_form: g_closed,
                gradient_monte_carlo: g_mc,
                max_gradient_z,
                sigmoid_regularizer: reg,
                sigmoid_gap_monte_carlo: gap,
                sigmoid_gap_standard_error: gap_se,
            });
        }
        let max_error_z = units
            .iter()
            .filter_map(|u| u.decomposition.z_score())
            .map(f64::abs)
            .fold(0.0, f64::max);
        let max_gradient_z = units.iter().map(|u| u.max_gradient_z).fold(0.0, f64::max);
        println!("{law}: max |z| error {max_error_z:.2}, gradient {max_gradient_z:.2} over {} units", units.len());
        let report = DynamicReport {
            distribution: *law,
            mode,
            n_samples: a.samples,
            max_error_z,
            max_gradient_z,
            units,
        };
        write_json(&dir, &format!("dynamic_{}.json", slug(&law.to_string())), &report)?;
    }
    write_text(&dir, "dynamic_residuals.csv", &csv)?;
    Ok(())
}

fn checks_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("id,passed,metric,tolerance\n");
    for r in results {
        out.push_str(&format!("{},{},{},{}\n", r.id, r.passed, r.metric, r.tolerance));
    }
    out
}

pub fn verify(a: VerifyArgs) -> CliResult {
    let d = VerifyConfig::default();
    let cfg = VerifyConfig {
        seed: a.common.seed,
        moment_samples: a.samples.unwrap_or(d.moment_samples),
        dynamic_samples: a.samples.unwrap_or(d.dynamic_samples),
        instances: a.instances.unwrap_or(d.instances),
        ..d
    };
    let results = run_all(&cfg)?;
    for r in &results {
        println!("{}", r.line());
    }
    let dir = ensure_dir(&a.common.out_dir)?;
    write_json(&dir, "verify.json", &results)?;
    if a.common.format == Format::Csv {
        write_text(&dir, "verify.csv", &checks_csv(&results))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
