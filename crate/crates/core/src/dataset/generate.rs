//! Dataset generation: sample dip angles, solve each geometry with the FEM
//! oracle, and sample the labels. Geometries run in parallel; results are
//! collected in id order so reruns with one seed are byte-identical.

use rayon::prelude::*;

use super::{
    assign_splits, DataError, Split, StaticDataset, StaticSample, TransientDataset,
    TransientSample,
};
use crate::fem::{
    assemble_static, build_mesh, injection_bcs, run_transient_with, sample_surface,
    sample_uy_grid, solve_static, TransientConfig,
};
use crate::geom::{
    rasterize, sample_dip_angles, to_input_image, DomainSpec, LayerSpec, MaterialRegistry,
};

/// Shared knobs for both dataset kinds.
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub domain: DomainSpec,
    pub layer: LayerSpec,
    pub mesh_nx: usize,
    pub mesh_ny: usize,
    pub registry: MaterialRegistry,
    /// Upward traction magnitude on the injection patch, Pa.
    pub traction: f64,
    /// Pool size; split 95/5 into train/validation.
    pub n_samples: usize,
    /// Freshly generated test geometries as a fraction of the pool.
    pub test_fraction: f64,
    pub seed: u64,
}

impl GenerateConfig {
    pub fn new(n_samples: usize, mesh_nx: usize, mesh_ny: usize, seed: u64) -> Self {
        Self {
            domain: DomainSpec::default(),
            layer: LayerSpec::default(),
            mesh_nx,
            mesh_ny,
            registry: MaterialRegistry::default(),
            traction: 1e6,
            n_samples,
            test_fraction: 0.05,
            seed,
        }
    }
}

/// Transient generation: the same geometry sampling plus the time axis.
#[derive(Debug, Clone)]
pub struct TransientGenerateConfig {
    pub base: GenerateConfig,
    /// Time step in seconds; the default run covers 20 years in 1000 steps.
    pub dt: f64,
    pub n_steps: usize,
    pub surface_points: usize,
}

impl TransientGenerateConfig {
    pub fn new(base: GenerateConfig, dt: f64, n_steps: usize) -> Self {
        Self { base, dt, n_steps, surface_points: 40 }
    }

    /// Twenty years in 1000 steps (dt about 7.3 days).
    pub fn twenty_years(base: GenerateConfig) -> Self {
        let dt = 20.0 * 365.25 * 86_400.0 / 1000.0;
        Self::new(base, dt, 1000)
    }
}

struct GeometryTask {
    id: u64,
    dip_deg: f64,
    split: Split,
}

fn plan_geometries(cfg: &GenerateConfig) -> Result<Vec<GeometryTask>, DataError> {
    let dips = sample_dip_angles(cfg.n_samples, cfg.seed)
        .map_err(|source| DataError::Geometry { id: 0, source })?;
    let splits = assign_splits(cfg.n_samples, cfg.seed.wrapping_add(1))?;
    let mut tasks: Vec<GeometryTask> = dips
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (dip_deg, split))| GeometryTask { id: i as u64, dip_deg, split })
        .collect();
    let n_test = (cfg.n_samples as f64 * cfg.test_fraction).round() as usize;
    if n_test > 0 {
        let test_dips = sample_dip_angles(n_test, cfg.seed.wrapping_add(2))
            .map_err(|source| DataError::Geometry { id: 0, source })?;
        tasks.extend(test_dips.into_iter().enumerate().map(|(i, dip_deg)| GeometryTask {
            id: (cfg.n_samples + i) as u64,
            dip_deg,
            split: Split::Test,
        }));
    }
    Ok(tasks)
}

pub fn generate_static(cfg: &GenerateConfig) -> Result<StaticDataset, DataError> {
    let mesh = build_mesh(&cfg.domain, cfg.mesh_nx, cfg.mesh_ny)
        .map_err(|source| DataError::Fem { id: 0, source })?;
    let tasks = plan_geometries(cfg)?;
    let samples: Result<Vec<StaticSample>, DataError> = tasks
        .par_iter()
        .map(|task| {
            let layer = LayerSpec { dip_deg: task.dip_deg, ..cfg.layer };
            let field = rasterize(&cfg.domain, &layer, cfg.mesh_nx, cfg.mesh_ny)
                .map_err(|source| DataError::Geometry { id: task.id, source })?;
            let bcs = injection_bcs(&mesh, cfg.traction);
            let sys = assemble_static(&mesh, &field.element_classes, &cfg.registry, &bcs, None)
                .map_err(|source| DataError::Fem { id: task.id, source })?;
            let sol = solve_static(&sys).map_err(|source| DataError::Fem { id: task.id, source })?;
            let label: Vec<f32> =
                sample_uy_grid(&sol.u, &mesh, 50, 25).into_iter().map(|v| v as f32).collect();
            let image = to_input_image(&field);
            Ok(StaticSample {
                id: task.id,
                dip_deg: task.dip_deg,
                classes: field.classes,
                image,
                label,
                split: task.split,
            })
        })
        .collect();
    Ok(StaticDataset {
        domain: cfg.domain,
        mesh_nx: cfg.mesh_nx,
        mesh_ny: cfg.mesh_ny,
        samples: samples?,
    })
}

pub fn generate_transient(cfg: &TransientGenerateConfig) -> Result<TransientDataset, DataError> {
    let base = &cfg.base;
    let mesh = build_mesh(&base.domain, base.mesh_nx, base.mesh_ny)
        .map_err(|source| DataError::Fem { id: 0, source })?;
    let tasks = plan_geometries(base)?;
    let samples: Result<Vec<TransientSample>, DataError> = tasks
        .par_iter()
        .map(|task| {
            let layer = LayerSpec { dip_deg: task.dip_deg, ..base.layer };
            let field = rasterize(&base.domain, &layer, base.mesh_nx, base.mesh_ny)
                .map_err(|source| DataError::Geometry { id: task.id, source })?;
            let bcs = injection_bcs(&mesh, base.traction);
            let config = TransientConfig::new(cfg.dt, cfg.n_steps);
            let states = run_transient_with(
                &mesh,
                &field.element_classes,
                &base.registry,
                &bcs,
                &config,
            )
            .map_err(|source| DataError::Fem { id: task.id, source })?;
            // Row t is the state after step t+1; the zero initial state is
            // not part of the label.
            let mut series = Vec::with_capacity(cfg.n_steps * cfg.surface_points);
            for state in &states[1..] {
                series.extend(
                    sample_surface(&state.u, &mesh, cfg.surface_points)
                        .into_iter()
                        .map(|v| v as f32),
                );
            }
            let image = to_input_image(&field);
            Ok(TransientSample {
                id: task.id,
                dip_deg: task.dip_deg,
                classes: field.classes,
                image,
                series,
                split: task.split,
            })
        })
        .collect();
    let mut ds = TransientDataset {
        domain: base.domain,
        mesh_nx: base.mesh_nx,
        mesh_ny: base.mesh_ny,
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        surface_points: cfg.surface_points,
        samples: samples?,
        scaler: None,
    };
    ds.fit_scaler()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_generation_is_deterministic_and_split() {
        let cfg = GenerateConfig::new(20, 8, 4, 42);
        let a = generate_static(&cfg).unwrap();
        let b = generate_static(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 21); // 20 pool + 1 fresh test
        assert_eq!(a.samples.iter().filter(|s| s.split == Split::Val).count(), 1);
        assert_eq!(a.samples.iter().filter(|s| s.split == Split::Test).count(), 1);
        // Ids are unique across splits.
        let mut ids: Vec<u64> = a.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), a.samples.len());
        for s in &a.samples {
            assert_eq!(s.label.len(), 1250);
            assert!(s.label.iter().all(|v| v.is_finite()));
        }
        // The injection load pushes the surface up somewhere.
        let max_lift = a.samples[0].label.iter().cloned().fold(f32::MIN, f32::max);
        assert!(max_lift > 0.0);
    }

    #[test]
    fn transient_generation_scales_training_series() {
        let base = GenerateConfig::new(20, 8, 4, 7);
        let cfg = TransientGenerateConfig::new(base, 1e6, 12);
        let ds = generate_transient(&cfg).unwrap();
        assert_eq!(ds.samples[0].series.len(), 12 * 40);
        let scaler = ds.scaler.unwrap();
        assert!(scaler.max > scaler.min);
        for (i, s) in ds.samples.iter().enumerate() {
            if s.split == Split::Train {
                let scaled = ds.scaled_series(i).unwrap();
                assert!(scaled.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
            }
        }
    }
}
