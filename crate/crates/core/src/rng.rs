use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent streams drawn from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Weights = 0,
    Data = 1,
    Targets = 2,
    Auxiliary = 3,
}

/// Standard normal draws by the Box–Muller transform over ChaCha8.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        Self { rng, spare: None }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, std_dev: f64) -> f64 {
        std_dev * self.standard_normal()
    }

    pub fn fill_normal(&mut self, std_dev: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal(std_dev));
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}
