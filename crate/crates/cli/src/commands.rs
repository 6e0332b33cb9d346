use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use dpfp::attacks::{correlation_attack, random_flipping, subset_attack};
use dpfp::crypto_rand::gen_fingerprint;
use dpfp::datamodel::{bit_width, compute_sensitivity, RelationalDatabase, Schema, SensitivitySpec};
use dpfp::extractor::{detect_traitor, extract_with_plan, match_threshold_d, ExtractionResult};
use dpfp::fingerprinter::{
    min_marking_probability, postprocess_domain, recipient_fingerprint, FingerprintParams, MarkPlan,
};
use dpfp::svt::{default_gamma, share_multi, solve_budget, SvtConfig};
use dpfp::theory::{
    confidence_gain, density_bound, expected_error_bound, infcap_bound, joint_bounds, marginal_bounds,
    p_rbst_rnd, p_rbst_sub, GainCell, GainVariant, RobustnessMode,
};
use dpfp::utility::{
    changed_entry_fraction, empirical_distributions, fingerprint_density, query_accuracy, two_stage_baseline,
    variance_change, Distributions, QuerySpec,
};

use crate::artifacts::{load_key, write_atomic, write_json, Manifest};
use crate::{
    AttackArgs, AttackChoice, BaselineArgs, BoundArgs, BoundName, CliError, DetectArgs, ExtractArgs,
    FingerprintArgs, GainForm, GammaBasisArg, MechanismArgs, ShareArgs, TableArgs, UtilityArgs,
};

fn load_schema(path: &Path) -> Result<Schema, CliError> {
    Ok(Schema::load(path)?)
}

fn load_db(path: &Path, schema: &Schema) -> Result<RelationalDatabase, CliError> {
    Ok(RelationalDatabase::load_csv(path, schema)?)
}

fn load_table(t: &TableArgs) -> Result<(Schema, RelationalDatabase), CliError> {
    let schema = load_schema(&t.schema)?;
    let db = load_db(&t.db, &schema)?;
    Ok((schema, db))
}

fn sensitivity(db: &RelationalDatabase, schema: &Schema, delta: Option<u32>) -> Result<SensitivitySpec, CliError> {
    Ok(compute_sensitivity(db, schema.sensitivity.mode, delta.or(schema.sensitivity.delta))?)
}

fn mechanism_params(
    m: &MechanismArgs,
    db: &RelationalDatabase,
    schema: &Schema,
) -> Result<(FingerprintParams, SensitivitySpec), CliError> {
    let sens = sensitivity(db, schema, m.delta)?;
    let mut params = FingerprintParams::from_epsilon(m.epsilon, sens.delta, m.len)?;
    if let Some(p) = m.p {
        params = params.with_p(p)?;
    }
    Ok((params, sens))
}

fn record_params(manifest: &mut Manifest, params: &FingerprintParams, sens: &SensitivitySpec) {
    manifest
        .param("epsilon", params.epsilon)
        .param("delta", sens.delta)
        .param("sensitivity_mode", sens.mode)
        .param("k", params.k)
        .param("p", params.p)
        .param("selection_modulus", params.selection_modulus())
        .param("fingerprint_len", params.fingerprint_len);
}

fn write_csv(path: &Path, db: &RelationalDatabase) -> Result<(), CliError> {
    write_atomic(path, db.to_csv_string()?.as_bytes())
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(dpfp::Error::from)?;
            println!("{text}");
            Ok(())
        }
    }
}

pub fn fingerprint(a: &FingerprintArgs) -> Result<(), CliError> {
    let (schema, db) = load_table(&a.table)?;
    let (params, sens) = mechanism_params(&a.mechanism, &db, &schema)?;
    let (key, key_source) = load_key(a.key.key_file.as_deref())?;
    let plan = MarkPlan::build(&db, &params, &key);
    let f = recipient_fingerprint(&params, &key, &a.sp_id)?;
    let marked = plan.apply(&db, &f)?;
    log::info!(
        "{} of {} positions selected",
        plan.selected_count(),
        plan.position_count()
    );
    let mut manifest = Manifest::new("fingerprint");
    record_params(&mut manifest, &params, &sens);
    manifest.param("sp_id", &a.sp_id).param("key_source", key_source);
    manifest.input(&a.table.db)?.input(&a.table.schema)?;
    if let Some(marks) = &a.marks {
        write_json(marks, &plan.decisions(&db, &f))?;
        manifest.output(marks);
    }
    write_csv(&a.out, &postprocess_domain(marked))?;
    manifest.output(&a.out).write_beside(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ExtractionArtifact<'a> {
    template: String,
    #[serde(flatten)]
    result: &'a ExtractionResult,
}

pub fn extract(a: &ExtractArgs) -> Result<(), CliError> {
    let schema = load_schema(&a.schema)?;
    let original = load_db(&a.original, &schema)?;
    let leak = load_db(&a.leak, &schema)?;
    let (params, sens) = mechanism_params(&a.mechanism, &original, &schema)?;
    let (key, key_source) = load_key(a.key.key_file.as_deref())?;
    let plan = MarkPlan::build(&original, &params, &key);
    let result = extract_with_plan(&original, &leak, &params, &plan)?;
    let artifact = ExtractionArtifact {
        template: result.template(),
        result: &result,
    };
    emit(a.out.as_deref(), &artifact)?;
    if let Some(out) = &a.out {
        let mut manifest = Manifest::new("extract");
        record_params(&mut manifest, &params, &sens);
        manifest.param("key_source", key_source);
        manifest.input(&a.original)?.input(&a.leak)?.input(&a.schema)?;
        manifest.output(out).write_beside(out)?;
    }
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.extraction)
        .map_err(|e| CliError::data(format!("cannot read extraction {}: {e}", a.extraction.display())))?;
    let extraction: ExtractionResult = serde_json::from_str(&text).map_err(dpfp::Error::from)?;
    let text = std::fs::read_to_string(&a.registry)
        .map_err(|e| CliError::data(format!("cannot read registry {}: {e}", a.registry.display())))?;
    let registry: BTreeMap<String, String> = serde_json::from_str(&text).map_err(dpfp::Error::from)?;
    if registry.is_empty() {
        return Err(CliError::data("registry lists no recipients"));
    }
    let (key, key_source) = load_key(a.key.key_file.as_deref())?;
    let candidates = registry
        .iter()
        .map(|(ext, int)| Ok((ext.clone(), gen_fingerprint(&key, int.as_bytes(), extraction.len())?)))
        .collect::<dpfp::Result<Vec<_>>>()?;
    let d = match a.threshold {
        Some(d) => d,
        None => match_threshold_d(a.recipients.unwrap_or(registry.len() as u64), extraction.len())?,
    };
    let verdict = detect_traitor(&extraction, &candidates, d)?;
    emit(a.out.as_deref(), &verdict)?;
    if let Some(out) = &a.out {
        let mut manifest = Manifest::new("detect");
        manifest
            .param("threshold", d)
            .param("recipients", a.recipients)
            .param("key_source", key_source);
        manifest.input(&a.extraction)?.input(&a.registry)?;
        manifest.output(out).write_beside(out)?;
    }
    Ok(())
}

fn require(name: &str, v: Option<f64>) -> Result<f64, CliError> {
    v.ok_or_else(|| CliError::usage(format!("--{name} is required here")))
}

pub fn attack(a: &AttackArgs) -> Result<(), CliError> {
    let (schema, db) = load_table(&a.table)?;
    let k = match a.bits {
        Some(k) => k,
        None => bit_width(sensitivity(&db, &schema, None)?.delta),
    };
    let mut manifest = Manifest::new("attack");
    manifest.param("bits", k).seed("attack", a.seed);
    manifest.input(&a.table.db)?.input(&a.table.schema)?;
    let attacked = match a.kind {
        AttackChoice::Flip => {
            let g = require("gamma", a.gamma)?;
            manifest.param("kind", "flip").param("gamma_rnd", g);
            random_flipping(&db, k, g, a.seed)?
        }
        AttackChoice::Subset => {
            let g = require("gamma", a.gamma)?;
            manifest.param("kind", "subset").param("gamma_sub", g);
            subset_attack(&db, g, a.seed)?
        }
        AttackChoice::Corr => {
            let tau = require("tau", a.tau)?;
            manifest.param("kind", "corr").param("tau", tau);
            let reference: Distributions = match &a.ref_joint {
                Some(p) => {
                    manifest.input(p)?;
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::data(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(dpfp::Error::from)?
                }
                None => empirical_distributions(&db)?,
            };
            correlation_attack(&db, &reference, tau, k, a.seed)?
        }
    };
    write_csv(&a.out, &attacked)?;
    manifest.output(&a.out).write_beside(&a.out)?;
    Ok(())
}

fn bound_p(a: &BoundArgs) -> Result<f64, CliError> {
    match (a.p, a.epsilon) {
        (Some(p), _) => Ok(p),
        (None, Some(e)) => Ok(min_marking_probability(e, bit_width(a.delta))),
        (None, None) => Err(CliError::usage("give --p or --epsilon")),
    }
}

fn need<T: Copy>(name: &str, v: Option<T>) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::usage(format!("--{name} is required for this bound")))
}

pub fn bound(a: &BoundArgs) -> Result<(), CliError> {
    let k = bit_width(a.delta);
    let mut inputs = serde_json::Map::new();
    inputs.insert("delta".into(), json!(a.delta));
    inputs.insert("k".into(), json!(k));
    let result: Value = match a.name {
        BoundName::Infcap => {
            let psi = need("psi", a.psi)?;
            let eps = need("epsilon", a.epsilon)?;
            inputs.insert("psi".into(), json!(psi));
            inputs.insert("epsilon".into(), json!(eps));
            json!({ "value": infcap_bound(psi, eps)? })
        }
        BoundName::Error => {
            let p = bound_p(a)?;
            inputs.insert("p".into(), json!(p));
            json!({ "interval": expected_error_bound(a.delta, p) })
        }
        BoundName::Density => {
            let p = bound_p(a)?;
            let (n, t) = (need("n", a.n)?, need("t", a.t)?);
            inputs.insert("p".into(), json!(p));
            inputs.insert("n".into(), json!(n));
            inputs.insert("t".into(), json!(t));
            json!({ "interval": density_bound(a.delta, p, n, t) })
        }
        BoundName::Joint | BoundName::Marginal => {
            let p = bound_p(a)?;
            let prob = need("prob", a.prob)?;
            let (lo, hi) = (need("pr-min", a.pr_min)?, need("pr-max", a.pr_max)?);
            inputs.insert("p".into(), json!(p));
            inputs.insert("prob".into(), json!(prob));
            inputs.insert("pr_min".into(), json!(lo));
            inputs.insert("pr_max".into(), json!(hi));
            let iv = if matches!(a.name, BoundName::Joint) {
                joint_bounds(p, k, prob, lo, hi)
            } else {
                marginal_bounds(p, k, prob, lo, hi)
            };
            json!({ "interval": iv })
        }
        BoundName::Psub => {
            let p = bound_p(a)?;
            let (n, t, g) = (need("n", a.n)?, need("t", a.t)?, need("gamma", a.gamma)?);
            inputs.insert("p".into(), json!(p));
            inputs.insert("n".into(), json!(n));
            inputs.insert("t".into(), json!(t));
            inputs.insert("len".into(), json!(a.len));
            inputs.insert("gamma_sub".into(), json!(g));
            json!({ "value": p_rbst_sub(p, a.len, k, t, n, g)? })
        }
        BoundName::Prnd => {
            let p = bound_p(a)?;
            let (n, t, g) = (need("n", a.n)?, need("t", a.t)?, need("gamma", a.gamma)?);
            let d = match a.d {
                Some(d) => d,
                None => match_threshold_d(a.recipients, a.len)?,
            };
            let mode = if a.trials == 0 {
                RobustnessMode::ExactTiny
            } else {
                RobustnessMode::MonteCarlo { trials: a.trials, seed: a.seed }
            };
            inputs.insert("p".into(), json!(p));
            inputs.insert("n".into(), json!(n));
            inputs.insert("t".into(), json!(t));
            inputs.insert("len".into(), json!(a.len));
            inputs.insert("gamma_rnd".into(), json!(g));
            inputs.insert("d".into(), json!(d));
            inputs.insert("mode".into(), json!(mode));
            json!({ "value": p_rbst_rnd(p, g, n, k, t, a.len, d, mode)? })
        }
        BoundName::Gain => {
            let p = bound_p(a)?;
            let tau = need("tau", a.tau)?;
            let marginal = need("prob", a.prob)?;
            let path = a
                .cells
                .as_deref()
                .ok_or_else(|| CliError::usage("--cells is required for this bound"))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            let cells: Vec<GainCell> = serde_json::from_str(&text).map_err(dpfp::Error::from)?;
            let variant = match a.variant {
                GainForm::ScaledLambda => GainVariant::ScaledLambda,
                GainForm::Difference => GainVariant::Difference,
            };
            inputs.insert("p".into(), json!(p));
            inputs.insert("tau".into(), json!(tau));
            inputs.insert("marginal".into(), json!(marginal));
            inputs.insert("cells".into(), json!(cells));
            inputs.insert("variant".into(), json!(variant));
            json!({ "value": confidence_gain(p, k, tau, &cells, marginal, variant)? })
        }
    };
    let mut out = serde_json::Map::new();
    out.insert("name".into(), json!(format!("{:?}", a.name).to_lowercase()));
    out.insert("inputs".into(), Value::Object(inputs));
    if let Value::Object(m) = result {
        out.extend(m);
    }
    emit(None, &Value::Object(out))
}

pub fn share(a: &ShareArgs) -> Result<(), CliError> {
    let (schema, db) = load_table(&a.table)?;
    let sens = sensitivity(&db, &schema, a.delta)?;
    if a.ratio.iter().any(|r| !(*r > 0.0)) {
        return Err(CliError::usage("--ratio shares must be positive"));
    }
    let budget = solve_budget(a.epsilon0, a.delta_prime, a.recipients, a.epsilon)?;
    let x = budget.comparison_budget;
    let (r2, r3) = (a.ratio[0], a.ratio[1]);
    let params = FingerprintParams::from_epsilon(a.epsilon, sens.delta, a.len)?;
    let gamma = match a.gamma {
        Some(g) => g,
        None => {
            let m = match a.gamma_basis {
                GammaBasisArg::Nk => params.k as usize,
                GammaBasisArg::Nt => db.attribute_count(),
            };
            default_gamma(sens.delta, params.p, db.len(), m)
        }
    };
    let config = SvtConfig {
        gamma,
        epsilon: a.epsilon,
        epsilon2: x * r2 / (r2 + r3),
        epsilon3: x * r3 / (r2 + r3),
        delta: sens.delta,
        recipients: a.recipients,
        delta_prime: a.delta_prime,
        max_trials: a.max_trials,
        fingerprint_len: a.len,
        noise_seed: a.noise_seed,
    };
    config.validate()?;
    let (key, key_source) = load_key(a.key.key_file.as_deref())?;
    let (copies, ledger) = share_multi(&db, &config, &key)?;

    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let mut manifest = Manifest::new("share");
    manifest
        .param("epsilon0", a.epsilon0)
        .param("delta_prime", a.delta_prime)
        .param("config", config)
        .param("budget", budget)
        .param("sensitivity_mode", sens.mode)
        .param("k", params.k)
        .param("p", params.p)
        .param("key_source", key_source)
        .seed("noise", a.noise_seed);
    manifest.input(&a.table.db)?.input(&a.table.schema)?;
    let mut registry = BTreeMap::new();
    for (record, copy) in ledger.recipients.iter().zip(&copies) {
        let name = format!("copy_{:04}.csv", record.c);
        let path = a.out_dir.join(&name);
        write_csv(&path, copy)?;
        manifest.output(&path);
        registry.insert(format!("sp{}", record.c), record.internal_id.clone());
    }
    let registry_path = a.out_dir.join("registry.json");
    write_json(&registry_path, &registry)?;
    let ledger_path = a.out_dir.join("ledger.json");
    write_json(&ledger_path, &ledger)?;
    manifest.output(&registry_path).output(&ledger_path);
    manifest.write_beside(&ledger_path)?;
    log::info!(
        "{} copies, {} trials, epsilon0 {:.4}, delta0 {:.2e}",
        ledger.shared,
        ledger.total_trials,
        ledger.epsilon0,
        ledger.delta0
    );
    Ok(())
}

pub fn utility(a: &UtilityArgs) -> Result<(), CliError> {
    let schema = load_schema(&a.schema)?;
    let original = load_db(&a.original, &schema)?;
    let shared = load_db(&a.shared, &schema)?;
    let variance: BTreeMap<String, f64> = original
        .domains
        .iter()
        .map(|d| d.name.clone())
        .zip(variance_change(&original, &shared)?)
        .collect();
    let mut metrics = json!({
        "variance_change": variance,
        "fingerprint_density": fingerprint_density(&original, &shared)?,
        "changed_entry_fraction": changed_entry_fraction(&original, &shared)?,
    });
    let mut manifest = Manifest::new("utility");
    manifest.input(&a.original)?.input(&a.shared)?.input(&a.schema)?;
    if let Some(q) = &a.query {
        let text = std::fs::read_to_string(q)
            .map_err(|e| CliError::data(format!("cannot read query {}: {e}", q.display())))?;
        let query: QuerySpec = serde_json::from_str(&text).map_err(dpfp::Error::from)?;
        metrics["query_accuracy"] = json!(query_accuracy(&original, &shared, &query)?);
        manifest.input(q)?;
    }
    emit(a.out.as_deref(), &metrics)?;
    if let Some(out) = &a.out {
        manifest.output(out).write_beside(out)?;
    }
    Ok(())
}

pub fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let (schema, db) = load_table(&a.table)?;
    let (params, sens) = mechanism_params(&a.mechanism, &db, &schema)?;
    let (key, key_source) = load_key(a.key.key_file.as_deref())?;
    let released = two_stage_baseline(&db, params.epsilon, &key, &params, &a.sp_id, a.lambda, a.seed)?;
    let mut manifest = Manifest::new("baseline");
    record_params(&mut manifest, &params, &sens);
    manifest
        .param("lambda", a.lambda)
        .param("sp_id", &a.sp_id)
        .param("key_source", key_source)
        .seed("randomized_response", a.seed);
    manifest.input(&a.table.db)?.input(&a.table.schema)?;
    write_csv(&a.out, &released)?;
    manifest.output(&a.out).write_beside(&a.out)?;
    Ok(())
}
