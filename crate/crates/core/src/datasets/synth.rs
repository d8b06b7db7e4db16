//! Procedural top-down highway scenes with known vehicle counts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, TrafficClass};
use crate::error::{Error, Result};
use crate::micronet::Tensor;

/// Generator family. `Target` is the deployment scene, `Source` the
/// pre-training corpus and `Shifted` the same road seen by a different camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Shifted,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Shifted => "shifted",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Domain::Source => 0x5EED_50C3_0000_0001,
            Domain::Target => 0x7A26_E700_0000_0002,
            Domain::Shifted => 0x5A1F_7ED0_0000_0003,
        }
    }

    pub fn params(self) -> SceneParams {
        match self {
            Domain::Target => SceneParams::TARGET,
            Domain::Source => SceneParams::SOURCE,
            Domain::Shifted => SceneParams::SHIFTED,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "shifted" => Ok(Domain::Shifted),
            _ => Err(Error::Validation(format!("unknown domain {s:?}"))),
        }
    }
}

/// Vehicles per scene for Empty, Fluid, Heavy and Jam (inclusive ranges).
pub const VEHICLE_COUNTS: [(usize, usize); 4] = [(0, 0), (1, 4), (5, 10), (11, 18)];

/// Rendering constants for one generator family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub size: usize,
    pub road_top: usize,
    pub lanes: usize,
    pub lane_height: usize,
    pub vehicle_height: usize,
    /// Inclusive range of vehicle lengths along the lane.
    pub vehicle_len: (usize, usize),
    pub vehicle_brightness: (f64, f64),
    pub background: (f64, f64),
    pub road: (f64, f64),
    /// Additive global brightness offset (lighting and weather).
    pub brightness_jitter: (f64, f64),
    pub noise_sigma: f64,
}

impl SceneParams {
    pub const TARGET: SceneParams = SceneParams {
        size: 32,
        road_top: 8,
        lanes: 4,
        lane_height: 4,
        vehicle_height: 3,
        vehicle_len: (4, 4),
        vehicle_brightness: (0.7, 0.9),
        background: (0.25, 0.35),
        road: (0.08, 0.14),
        brightness_jitter: (-0.06, 0.06),
        noise_sigma: 0.03,
    };

    pub const SOURCE: SceneParams = SceneParams {
        size: 32,
        road_top: 6,
        lanes: 5,
        lane_height: 4,
        vehicle_height: 3,
        vehicle_len: (3, 5),
        vehicle_brightness: (0.55, 0.85),
        background: (0.2, 0.4),
        road: (0.05, 0.15),
        brightness_jitter: (-0.08, 0.08),
        noise_sigma: 0.02,
    };

    pub const SHIFTED: SceneParams = SceneParams {
        size: 32,
        road_top: 8,
        lanes: 4,
        lane_height: 4,
        vehicle_height: 3,
        vehicle_len: (8, 10),
        vehicle_brightness: (0.7, 0.95),
        background: (0.25, 0.35),
        road: (0.14, 0.2),
        brightness_jitter: (0.05, 0.15),
        noise_sigma: 0.06,
    };
}

/// What was drawn into a scene: `(x, y, width, height)` per vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub rects: Vec<(usize, usize, usize, usize)>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-image seed derived from a corpus seed.
pub fn scene_seed(corpus_seed: u64, domain: Domain, class: TrafficClass, index: usize) -> u64 {
    let mut h = splitmix64(corpus_seed ^ domain.salt());
    h = splitmix64(h ^ class.index() as u64);
    splitmix64(h ^ index as u64)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn place_vehicles(
    p: &SceneParams,
    class: TrafficClass,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize, usize)> {
    let (lo, hi) = VEHICLE_COUNTS[class.index()];
    let count = rng.random_range(lo..=hi);
    let lane_row = |rng: &mut ChaCha8Rng, lane: usize| {
        p.road_top + lane * p.lane_height + rng.random_range(0..=p.lane_height - p.vehicle_height)
    };
    let mut rects = Vec::with_capacity(count);
    if class == TrafficClass::Jam {
        // Bumper-to-bumper queues: consecutive vehicles in a lane overlap.
        let first = rng.random_range(0..p.lanes);
        let mut per_lane = vec![0usize; p.lanes];
        for k in 0..count {
            per_lane[(first + k) % p.lanes] += 1;
        }
        for (lane, &n) in per_lane.iter().enumerate() {
            let mut x = rng.random_range(0..=2usize);
            for _ in 0..n {
                let len = rng.random_range(p.vehicle_len.0..=p.vehicle_len.1);
                let x0 = x.min(p.size - len);
                rects.push((x0, lane_row(rng, lane), len, p.vehicle_height));
                x = x0 + len - 1 - rng.random_range(0..=1usize);
            }
        }
    } else {
        for _ in 0..count {
            let len = rng.random_range(p.vehicle_len.0..=p.vehicle_len.1);
            let mut chosen = None;
            for _ in 0..64 {
                let lane = rng.random_range(0..p.lanes);
                let x = rng.random_range(0..=p.size - len);
                let y = lane_row(rng, lane);
                let clear = rects.iter().all(|&(ox, oy, ol, _)| {
                    let same_lane = (oy - p.road_top) / p.lane_height == lane;
                    !same_lane || x + len < ox || ox + ol < x
                });
                chosen = Some((x, y, len));
                if clear {
                    break;
                }
            }
            let (x, y, len) = chosen.expect("at least one attempt");
            rects.push((x, y, len, p.vehicle_height));
        }
    }
    rects
}

/// Renders a scene for `class` with the given generator family.
pub fn synth_scene_in(
    params: &SceneParams,
    domain: Domain,
    class: TrafficClass,
    seed: u64,
) -> (LabeledImage, SceneSummary) {
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = uniform(&mut rng, p.background);
    let road = uniform(&mut rng, p.road);
    let offset = uniform(&mut rng, p.brightness_jitter);
    let road_bottom = p.road_top + p.lanes * p.lane_height;
    let mut px = vec![background; p.size * p.size];
    for row in px.chunks_mut(p.size).take(road_bottom).skip(p.road_top) {
        row.fill(road);
    }
    let rects = place_vehicles(p, class, &mut rng);
    for &(x, y, w, h) in &rects {
        let v = uniform(&mut rng, p.vehicle_brightness);
        for row in y..y + h {
            px[row * p.size + x..row * p.size + x + w].fill(v);
        }
    }
    let noise = Normal::new(0.0, p.noise_sigma).expect("valid sigma");
    for v in &mut px {
        *v = (*v + offset + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let pixels = Tensor::from_vec(vec![p.size, p.size, 1], px).expect("scene shape");
    let image = LabeledImage {
        pixels,
        label: class,
        source_id: format!("synth:{domain}:{class}:{seed}"),
    };
    (image, SceneSummary { rects })
}

/// 32x32 grayscale scene from the deployment (`target`) family.
pub fn synth_scene(class: TrafficClass, seed: u64) -> LabeledImage {
    synth_scene_in(&SceneParams::TARGET, Domain::Target, class, seed).0
}

/// Balanced corpus with classes interleaved: `Empty, Fluid, Heavy, Jam, Empty, ...`.
pub fn synth_dataset(per_class: usize, seed: u64, domain: Domain) -> Dataset {
    let params = domain.params();
    let mut items = Vec::with_capacity(per_class * TrafficClass::ALL.len());
    for i in 0..per_class {
        for class in TrafficClass::ALL {
            let s = scene_seed(seed, domain, class, i);
            items.push(synth_scene_in(&params, domain, class, s).0);
        }
    }
    Dataset::new(items)
}

/// Parses a `synth:<domain>:<class>:<seed>` descriptor and regenerates the scene.
pub(crate) fn regenerate(source_id: &str) -> Option<Result<LabeledImage>> {
    let rest = source_id.strip_prefix("synth:")?;
    let parts: Vec<&str> = rest.split(':').collect();
    let parsed = (|| {
        let [domain, class, seed] = parts.as_slice() else {
            return Err(Error::Validation(format!("bad synth descriptor {source_id:?}")));
        };
        let domain: Domain = domain.parse()?;
        let class: TrafficClass = class.parse()?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Validation(format!("bad seed in {source_id:?}")))?;
        Ok(synth_scene_in(&domain.params(), domain, class, seed).0)
    })();
    Some(parsed)
}
