//! Config → plant → linearization → LQR → dataset → policy → controllers.

use std::path::Path;

use mampc_core::hybrid::{HybridContext, MampcConfig, Variant};
use mampc_core::lqr::{design_lqr, validate_roa_ball, LqrSolution, RoaReport};
use mampc_core::mpc::{MpcController, MpcSpec};
use mampc_core::plants::{Linearization, Plant};
use mampc_core::policy_nn::{sample_dataset, train_imitation, LossCurve, MlpPolicy, TrainConfig};
use mampc_core::{BoxSet, MampcError, NormBall};
use nalgebra::{DMatrix, DVector};

use crate::config::ScenarioConfig;
use crate::error::{BenchError, Result};
use crate::lookup::{build_lookup_baseline, LookupPolicy};
use crate::sim::ImplicitMpc;

/// Seeds derived from the config's master seed.
pub fn dataset_seed(cfg: &ScenarioConfig) -> u64 {
    cfg.seed
}

pub fn training_seed(cfg: &ScenarioConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

pub fn roa_seed(cfg: &ScenarioConfig) -> u64 {
    cfg.seed.wrapping_add(2)
}

fn check_len(key: &str, want: usize, got: usize) -> Result<()> {
    if want == got {
        Ok(())
    } else {
        Err(BenchError::config(key, format!("expected {want} entries, got {got}")))
    }
}

pub fn build_plant(cfg: &ScenarioConfig) -> Result<Plant<f64>> {
    let mut plant = Plant::by_name(&cfg.plant.name).map_err(|e| BenchError::config("plant.name", e.to_string()))?;
    for (k, v) in &cfg.plant.params {
        plant
            .set_param(k, *v)
            .map_err(|e| BenchError::config(format!("plant.params.{k}"), e.to_string()))?;
    }
    if let Some(s) = cfg.plant.substeps {
        if s == 0 {
            return Err(BenchError::config("plant.substeps", "must be at least 1"));
        }
        plant.substeps = s;
    }
    check_len("sim.x0", plant.n, cfg.sim.x0.len())?;
    check_len("nn.sampling_lower", plant.n, cfg.nn.sampling_lower.len())?;
    Ok(plant)
}

pub fn weights(cfg: &ScenarioConfig, plant: &Plant<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = cfg.mpc.q_diag.clone().unwrap_or_else(|| vec![1.0; plant.n]);
    let r = cfg.mpc.r_diag.clone().unwrap_or_else(|| vec![1.0; plant.m]);
    check_len("mpc.q_diag", plant.n, q.len())?;
    check_len("mpc.r_diag", plant.m, r.len())?;
    if q.iter().any(|v| !(*v >= 0.0)) {
        return Err(BenchError::config("mpc.q_diag", "entries must be nonnegative"));
    }
    if r.iter().any(|v| !(*v > 0.0)) {
        return Err(BenchError::config("mpc.r_diag", "entries must be positive"));
    }
    Ok((DMatrix::from_diagonal(&DVector::from_vec(q)), DMatrix::from_diagonal(&DVector::from_vec(r))))
}

pub fn mpc_spec(cfg: &ScenarioConfig, plant: &Plant<f64>, lin: &Linearization<f64>) -> Result<MpcSpec<f64>> {
    let (q, r) = weights(cfg, plant)?;
    let mut spec = MpcSpec::for_plant(plant, lin, cfg.mpc.horizon, q, r)?;
    if let Some(rad) = cfg.mpc.terminal_radius {
        spec.terminal_ball = Some(NormBall::new(rad).map_err(|e| BenchError::config("mpc.terminal_radius", e.to_string()))?);
        spec.validate()?;
    }
    Ok(spec)
}

pub fn sampling_box(cfg: &ScenarioConfig) -> Result<BoxSet<f64>> {
    BoxSet::from_slices(&cfg.nn.sampling_lower, &cfg.nn.sampling_upper).map_err(|e| BenchError::config("nn.sampling_upper", e.to_string()))
}

pub fn mampc_config(cfg: &ScenarioConfig) -> Result<MampcConfig<f64>> {
    let s = &cfg.mampc;
    let variant: Variant = s.variant.parse().map_err(|e: MampcError| BenchError::config("mampc.variant", e.to_string()))?;
    let mut out = match variant {
        Variant::Standard => MampcConfig::standard(s.n_lqr),
        Variant::AlternatingAuthority => MampcConfig::alternating_authority(s.n_lqr, s.i_d),
        Variant::WayPoint => {
            let r = s.wp_radius.ok_or_else(|| BenchError::config("mampc.wp_radius", "required by the way_point variant"))?;
            MampcConfig::way_point(s.n_lqr, r, s.n_wp).map_err(|e| BenchError::config("mampc.wp_radius", e.to_string()))?
        }
    };
    out.erosion_delta = s.erosion_delta;
    out.i_d = s.i_d;
    out.n_wp = s.n_wp;
    Ok(out)
}

pub fn train_config(cfg: &ScenarioConfig) -> TrainConfig<f64> {
    TrainConfig {
        epochs: cfg.nn.epochs,
        batch_size: cfg.nn.batch_size,
        learning_rate: cfg.nn.learning_rate,
        validation_fraction: cfg.nn.validation_fraction,
        seed: training_seed(cfg),
        ..TrainConfig::default()
    }
}

/// Everything a scenario needs, built once.
#[derive(Debug, Clone)]
pub struct Built {
    pub cfg: ScenarioConfig,
    pub plant: Plant<f64>,
    pub lin: Linearization<f64>,
    pub spec: MpcSpec<f64>,
    pub lqr: LqrSolution<f64>,
    pub roa: Option<RoaReport<f64>>,
    pub policy: MlpPolicy<f64>,
    /// Absent when the policy was loaded from disk.
    pub curve: Option<LossCurve<f64>>,
    pub dataset_len: usize,
}

/// Plant, MPC and LQR only.
pub fn build_models(cfg: &ScenarioConfig) -> Result<(Plant<f64>, Linearization<f64>, MpcSpec<f64>, LqrSolution<f64>)> {
    cfg.validate()?;
    let plant = build_plant(cfg)?;
    let lin = plant.linearize_discrete()?;
    let spec = mpc_spec(cfg, &plant, &lin)?;
    let lqr = design_lqr(&lin.a_d, &lin.b_d, &spec.q, &spec.r, cfg.lqr.roa_radius)?;
    Ok((plant, lin, spec, lqr))
}

pub fn validate_roa(cfg: &ScenarioConfig, plant: &Plant<f64>, lqr: &LqrSolution<f64>) -> Result<RoaReport<f64>> {
    Ok(validate_roa_ball(plant, &lqr.k, cfg.lqr.roa_radius, cfg.lqr.validate_samples, cfg.lqr.validate_horizon, roa_seed(cfg))?)
}

pub fn train_policy(cfg: &ScenarioConfig, plant: &Plant<f64>, spec: &MpcSpec<f64>) -> Result<(MlpPolicy<f64>, LossCurve<f64>, usize)> {
    let sb = sampling_box(cfg)?;
    let data = sample_dataset(spec, &sb, cfg.nn.dataset_size, dataset_seed(cfg))?;
    let sizes = cfg.layer_sizes(plant.n, plant.m);
    let (policy, curve) = train_imitation(&data, &sizes, &train_config(cfg))?;
    Ok((policy, curve, data.len()))
}

/// Runs every stage of the pipeline. `policy_dir` resolves a relative
/// `nn.policy_path`.
pub fn build(cfg: &ScenarioConfig, policy_dir: Option<&Path>) -> Result<Built> {
    let (plant, lin, spec, lqr) = build_models(cfg)?;
    let roa = if cfg.lqr.validate { Some(validate_roa(cfg, &plant, &lqr)?) } else { None };
    let (policy, curve, dataset_len) = match &cfg.nn.policy_path {
        Some(p) => {
            let path = match policy_dir {
                Some(d) if Path::new(p).is_relative() => d.join(p),
                _ => Path::new(p).to_path_buf(),
            };
            let policy = MlpPolicy::load(&path)?;
            if policy.sizes() != cfg.layer_sizes(plant.n, plant.m).as_slice() {
                return Err(BenchError::config("nn.policy_path", format!("policy layers {:?} do not match nn.hidden/nn.depth", policy.sizes())));
            }
            (policy, None, 0)
        }
        None => {
            let (p, c, k) = train_policy(cfg, &plant, &spec)?;
            (p, Some(c), k)
        }
    };
    Ok(Built {
        cfg: cfg.clone(),
        plant,
        lin,
        spec,
        lqr,
        roa,
        policy,
        curve,
        dataset_len,
    })
}

impl Built {
    pub fn hybrid(&self) -> Result<HybridContext<f64>> {
        let mut ctx = HybridContext::assemble(self.plant.clone(), self.spec.clone(), self.lqr.clone(), self.policy.clone(), mampc_config(&self.cfg)?)?;
        ctx.set_parallel(self.cfg.mampc.parallel);
        Ok(ctx)
    }

    pub fn implicit_mpc(&self) -> Result<ImplicitMpc> {
        Ok(ImplicitMpc::new(MpcController::new(self.spec.clone())?, &self.plant))
    }

    pub fn lookup(&self) -> Result<Option<LookupPolicy>> {
        let Some(l) = &self.cfg.lookup else {
            return Ok(None);
        };
        check_len("lookup.lower", self.plant.n, l.lower.len())?;
        let region = BoxSet::from_slices(&l.lower, &l.upper).map_err(|e| BenchError::config("lookup.upper", e.to_string()))?;
        Ok(Some(build_lookup_baseline(&self.spec, &self.plant, &region, l.points_per_dim)?))
    }

    pub fn x0(&self) -> &[f64] {
        &self.cfg.sim.x0
    }
}
