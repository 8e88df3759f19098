use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::derive_seed;
use super::shapes::CategorySpec;
use crate::basis::{LatentCode, LinearShapeBasis};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Sim3Transform, Vec3};
use crate::labeling::{oracle_label_observation, LabelNoise, LabeledPointCloud, SymmetrySpec, DEFAULT_DUST_RADIUS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Pixel radius of the occlusion neighborhood; 0 keeps the plain z-buffer.
    pub neighborhood: usize,
    /// A point survives when its depth is within this fraction of the
    /// nearest depth in its neighborhood.
    pub depth_tolerance: f64,
    /// Camera distance range as multiples of the object diameter.
    pub distance: (f64, f64),
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            focal: 200.0,
            neighborhood: 1,
            depth_tolerance: 0.02,
            distance: (2.0, 4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Gaussian noise standard deviation as a fraction of the diameter.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub label_flip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub camera: CameraConfig,
    pub corruption: CorruptionConfig,
    pub n_points: usize,
    pub surface_points: usize,
    pub diameter: (f64, f64),
    pub dust_radius: f64,
    /// Latent components are drawn from N(0, 1) restricted to ±this.
    pub z_bound: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            corruption: CorruptionConfig::default(),
            n_points: 1024,
            surface_points: 20_000,
            diameter: (0.1, 0.5),
            dust_radius: DEFAULT_DUST_RADIUS,
            z_bound: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub category: String,
    pub seed: u64,
    pub gt_z: LatentCode,
    pub gt_pose: Sim3Transform,
    pub diameter: f64,
    pub symmetry: SymmetrySpec,
    /// Sampled surface of the decoded shape, world frame.
    pub full_cloud: PointCloud,
    /// Visible part of `full_cloud`.
    pub partial_cloud: PointCloud,
    /// Corrupted, labeled and resampled observation.
    pub observation: LabeledPointCloud,
    pub corruption: CorruptionConfig,
}

/// Pinhole z-buffer from a camera whose frame maps to the world by the rigid
/// `camera` transform (looking along +z). Keeps the nearest point per pixel,
/// then drops points that lie behind a neighboring pixel's surface.
pub fn partial_view(cloud: &PointCloud, camera: &Sim3Transform, cfg: &CameraConfig) -> Result<PointCloud> {
    Ok(visible_indices(cloud, camera, cfg)?
        .into_iter()
        .map(|i| cloud.points[i])
        .collect::<Vec<_>>()
        .into())
}

/// Indices of the points [`partial_view`] keeps, ascending.
pub fn visible_indices(cloud: &PointCloud, camera: &Sim3Transform, cfg: &CameraConfig) -> Result<Vec<usize>> {
    let (w, h) = (cfg.width, cfg.height);
    let to_cam = camera.inverse();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![usize::MAX; w * h];
    for (i, p) in cloud.iter().enumerate() {
        let q = to_cam.apply_point(p);
        if q.z <= 0.0 {
            continue;
        }
        let u = (cfg.focal * q.x / q.z + cx).floor();
        let v = (cfg.focal * q.y / q.z + cy).floor();
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let pix = v as usize * w + u as usize;
        if q.z < depth[pix] {
            depth[pix] = q.z;
            owner[pix] = i;
        }
    }
    let r = cfg.neighborhood as isize;
    let mut kept = Vec::new();
    for v in 0..h as isize {
        for u in 0..w as isize {
            let pix = v as usize * w + u as usize;
            if owner[pix] == usize::MAX {
                continue;
            }
            let mut nearest = depth[pix];
            for dv in -r..=r {
                for du in -r..=r {
                    let (nu, nv) = (u + du, v + dv);
                    if nu >= 0 && nv >= 0 && nu < w as isize && nv < h as isize {
                        nearest = nearest.min(depth[nv as usize * w + nu as usize]);
                    }
                }
            }
            if depth[pix] <= nearest * (1.0 + cfg.depth_tolerance) {
                kept.push(owner[pix]);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyView);
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Number of points replaced by outliers: `round(fraction · n)`, halves up.
pub fn outlier_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

/// Adds isotropic Gaussian noise of standard deviation `sigma · diameter`
/// and replaces `outlier_count(n, outlier_fraction)` random points by uniform
/// draws in the bounding box inflated 1.5× about its center.
pub fn corrupt(cloud: &PointCloud, sigma: f64, outlier_fraction: f64, diameter: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !(0.0..1.0).contains(&outlier_fraction) {
        return Err(Error::InvalidConfig(
            "need sigma ≥ 0 and 0 ≤ outlier fraction < 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma * diameter).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for p in points.iter_mut() {
            *p += Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
        }
    }
    let k = outlier_count(points.len(), outlier_fraction);
    if k > 0 {
        let (lo, hi) = cloud.bounds().expect("non-empty when k > 0");
        let mid = (lo + hi) / 2.0;
        let half = (hi - lo) * 0.75;
        for i in sample_indices(&mut rng, points.len(), k).into_vec() {
            points[i] = mid + Vec3::from_fn(|a, _| rng.random_range(-1.0..=1.0) * half[a]);
        }
    }
    Ok(points.into())
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

/// Exactly `n` entries of `0..len`: a random subset if there are enough,
/// otherwise everything plus random repeats.
fn resample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    if len >= n {
        let mut idx = sample_indices(rng, len, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    }
}

/// Draws a latent code, pose and camera view, then observes the decoded
/// shape: partial view, corruption, oracle labels and resampling.
pub fn synth_scene(
    basis: &LinearShapeBasis,
    spec: &CategorySpec,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<SceneInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_z = LatentCode(
        (0..basis.latent_dim())
            .map(|_| truncated_normal(&mut rng, cfg.z_bound))
            .collect(),
    );
    let shape = basis.decode(&gt_z)?;
    let diameter = if cfg.diameter.0 < cfg.diameter.1 {
        rng.random_range(cfg.diameter.0..=cfg.diameter.1)
    } else {
        cfg.diameter.0
    };
    let (dmin, dmax) = cfg.camera.distance;
    let distance = diameter
        * if dmin < dmax {
            rng.random_range(dmin..=dmax)
        } else {
            dmin
        };
    let gt_pose = Sim3Transform {
        scale: diameter,
        rotation: Sim3Transform::random_rotation(&mut rng),
        translation: Vec3::new(0.0, 0.0, distance),
    };

    let full_cloud = gt_pose.apply(&shape.surface_points(cfg.surface_points, derive_seed(seed, 1)).into());
    let partial_cloud = partial_view(&full_cloud, &Sim3Transform::identity(), &cfg.camera)?;
    let c = &cfg.corruption;
    let corrupted = corrupt(
        &partial_cloud,
        c.noise_sigma,
        c.outlier_fraction,
        diameter,
        derive_seed(seed, 2),
    )?;
    let noise = LabelNoise {
        flip_fraction: c.label_flip,
        dust_radius: cfg.dust_radius,
        seed: derive_seed(seed, 3),
    };
    let labeled = oracle_label_observation(&corrupted, &gt_pose, &shape, &noise);
    let idx = resample_indices(&mut rng, labeled.len(), cfg.n_points);
    let observation = LabeledPointCloud {
        points: idx.iter().map(|&i| labeled.points.points[i]).collect::<Vec<_>>().into(),
        labels: idx.iter().map(|&i| labeled.labels[i]).collect(),
    };
    Ok(SceneInstance {
        category: spec.name.clone(),
        seed,
        gt_z,
        gt_pose,
        diameter,
        symmetry: spec.symmetry.clone(),
        full_cloud,
        partial_cloud,
        observation,
        corruption: c.clone(),
    })
}

/// [`synth_scene`] retried with derived seeds while the view is empty.
pub fn synth_scene_retry(
    basis: &LinearShapeBasis,
    spec: &CategorySpec,
    seed: u64,
    cfg: &SceneConfig,
    attempts: usize,
) -> Result<SceneInstance> {
    let mut last = Error::EmptyView;
    for k in 0..attempts.max(1) {
        let s = if k == 0 {
            seed
        } else {
            derive_seed(seed, 100 + k as u64)
        };
        match synth_scene(basis, spec, s, cfg) {
            Err(Error::EmptyView) => last = Error::EmptyView,
            other => return other,
        }
    }
    Err(last)
}
