//! Procedural road patches with cosine-bowl potholes.
//!
//! A scene is a square patch centered on the origin. The undisturbed surface
//! is a smooth low-frequency height field; each pothole subtracts
//! `D (1 + cos(pi r / R)) / 2` inside its rim radius `R`. A point is labeled
//! pothole (1) iff it is inside a rim and the bowl depth there exceeds the
//! sensor noise sigma, otherwise road (0). Labels are computed from the
//! analytic surface, not the noisy samples, using only basic IEEE arithmetic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::io::detmath::det_cos;

pub const ROAD: usize = 0;
pub const POTHOLE: usize = 1;

const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Side length of the square patch, in meters.
    pub extent: f64,
    /// Points per square meter.
    pub point_density: f64,
    pub pothole_count: usize,
    pub radius_range: (f64, f64),
    pub depth_range: (f64, f64),
    /// Amplitude of the undisturbed surface undulation.
    pub roughness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: 4.0,
            point_density: 128.0,
            pothole_count: 1,
            radius_range: (0.4, 0.7),
            depth_range: (0.08, 0.15),
            roughness: 0.01,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn point_count(&self) -> usize {
        (self.extent * self.extent * self.point_density).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.extent,
            self.point_density,
            self.radius_range.0,
            self.radius_range.1,
            self.depth_range.0,
            self.depth_range.1,
            self.roughness,
            self.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("scene spec values must be finite"));
        }
        if self.extent <= 0.0 || self.point_density <= 0.0 {
            return Err(Error::config("extent and point_density must be positive"));
        }
        if self.point_count() == 0 {
            return Err(Error::config("scene spec yields zero points"));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::config("radius range must satisfy 0 < min <= max"));
        }
        if 2.0 * r1 > self.extent {
            return Err(Error::config("largest pothole does not fit in the patch"));
        }
        let (d0, d1) = self.depth_range;
        if !(d0 > 0.0 && d0 <= d1) {
            return Err(Error::config("depth range must satisfy 0 < min <= max"));
        }
        if self.pothole_count > 0 && d1 <= self.noise_sigma {
            return Err(Error::config("pothole depths never exceed the noise sigma"));
        }
        if self.roughness < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::config("roughness and noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pothole {
    pub center: [f64; 2],
    pub radius: f64,
    pub depth: f64,
}

impl Pothole {
    /// Bowl depth at `(x, y)`, zero outside the rim.
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let r2 = dx * dx + dy * dy;
        if r2 >= self.radius * self.radius {
            return 0.0;
        }
        let r = r2.sqrt();
        self.depth * (1.0 + det_cos(std::f64::consts::PI * r / self.radius)) / 2.0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        dx * dx + dy * dy < self.radius * self.radius
    }
}

/// The label the generator assigns at `(x, y)`.
pub fn pothole_label(potholes: &[Pothole], noise_sigma: f64, x: f64, y: f64) -> usize {
    let hit = potholes
        .iter()
        .any(|p| p.contains(x, y) && p.depth_at(x, y) > noise_sigma);
    if hit {
        POTHOLE
    } else {
        ROAD
    }
}

/// Low-frequency undulation: a fixed sum of three tilted cosines with
/// random phases, scaled to `roughness`.
#[derive(Clone, Debug)]
struct Surface {
    amplitude: f64,
    waves: [(f64, f64, f64); 3],
}

impl Surface {
    fn sample<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Self {
        let base = std::f64::consts::TAU / spec.extent;
        let waves = std::array::from_fn(|_| {
            let kx = base * rng.gen_range(-1.0..1.0);
            let ky = base * rng.gen_range(-1.0..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (kx, ky, phase)
        });
        Surface {
            amplitude: spec.roughness / 3.0,
            waves,
        }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(kx, ky, ph)| det_cos(kx * x + ky * y + ph))
            .sum::<f64>()
            * self.amplitude
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: PointCloud,
    pub potholes: Vec<Pothole>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    Ok(generate_scene_detailed(spec)?.cloud)
}

pub fn generate_scene_detailed(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let potholes = place_potholes(spec, &mut rng)?;
    let surface = Surface::sample(spec, &mut rng);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let half = spec.extent / 2.0;
    let n = spec.point_count();
    let mut positions: Vec<Point> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-half..half);
        let y = rng.gen_range(-half..half);
        let bowl: f64 = potholes.iter().map(|p| p.depth_at(x, y)).sum();
        let mut z = surface.height(x, y) - bowl;
        if let Some(noise) = &noise {
            z += noise.sample(&mut rng);
        }
        positions.push([x, y, z]);
        labels.push(pothole_label(&potholes, spec.noise_sigma, x, y));
    }
    let cloud = PointCloud::from_positions(positions, Some(labels))?;
    if spec.pothole_count > 0 {
        let frac = cloud.class_fraction(POTHOLE).unwrap_or(0.0);
        if !(frac > 0.0 && frac < 0.5) {
            return Err(Error::data(format!(
                "generated pothole fraction {frac} is outside (0, 0.5); adjust density or radii"
            )));
        }
    }
    Ok(Scene { cloud, potholes })
}

fn place_potholes<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Vec<Pothole>> {
    let half = spec.extent / 2.0;
    let mut placed: Vec<Pothole> = Vec::with_capacity(spec.pothole_count);
    for i in 0..spec.pothole_count {
        let radius = uniform(rng, spec.radius_range);
        let depth = uniform(rng, spec.depth_range);
        let lim = half - radius;
        let mut found = None;
        for _ in 0..PLACEMENT_RETRIES {
            let c = [uniform(rng, (-lim, lim)), uniform(rng, (-lim, lim))];
            let clear = placed.iter().all(|p| {
                let (dx, dy) = (c[0] - p.center[0], c[1] - p.center[1]);
                let min = p.radius + radius;
                dx * dx + dy * dy >= min * min
            });
            if clear {
                found = Some(c);
                break;
            }
        }
        let center = found.ok_or_else(|| {
            Error::config(format!(
                "could not place pothole {} of {} without overlap after {PLACEMENT_RETRIES} tries",
                i + 1,
                spec.pothole_count
            ))
        })?;
        placed.push(Pothole { center, radius, depth });
    }
    Ok(placed)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}
