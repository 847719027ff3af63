//! Adam with inverse-square-root warmup schedule.

use crate::graph::Real;
use crate::params::{GradMap, ParamStore};

pub struct Adam {
    pub base_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(base_lr: f64, warmup: usize, n_params: usize) -> Self {
        Adam {
            base_lr,
            warmup,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }

    /// lr(t) = base · min(t/warmup, sqrt(warmup/t)); peak at t = warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.base_lr * (t / w).min((w / t).sqrt())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Serializes step count and first/second moments (f64 little-endian).
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(self.step as u64).to_le_bytes())?;
        f.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            f.write_all(&(m.len() as u64).to_le_bytes())?;
            for x in m.iter().chain(v) {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(&mut self, path: &std::path::Path) -> std::io::Result<()> {
        let buf = std::fs::read(path)?;
        let mut off = 0usize;
        let read_u64 = |off: &mut usize| {
            let v = u64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        self.step = read_u64(&mut off) as usize;
        let n = read_u64(&mut off) as usize;
        assert_eq!(n, self.m.len(), "optimizer state parameter count mismatch");
        for pid in 0..n {
            let len = read_u64(&mut off) as usize;
            let read_vec = |off: &mut usize| -> Vec<f64> {
                (0..len)
                    .map(|_| {
                        let v = f64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap());
                        *off += 8;
                        v
                    })
                    .collect()
            };
            self.m[pid] = read_vec(&mut off);
            self.v[pid] = read_vec(&mut off);
        }
        Ok(())
    }

    /// One update over all non-frozen parameters that received gradient.
    /// Frozen parameters are never touched.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &GradMap<F>) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for pid in 0..store.len() {
            if store.get(pid).frozen {
                continue;
            }
            let g = match grads.get(pid) {
                Some(g) => g,
                None => continue,
            };
            let n = g.len();
            if self.m[pid].is_empty() {
                self.m[pid] = vec![0.0; n];
                self.v[pid] = vec![0.0; n];
            }
            let p = store.get_mut(pid);
            for i in 0..n {
                let gi = g[i].to_f64();
                let m = &mut self.m[pid][i];
                let v = &mut self.v[pid][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                p.values[i] = F::from_f64(p.values[i].to_f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_sqrt_warmup_schedule() {
        let a = Adam::new(1e-3, 100, 0);
        assert!((a.lr_at(50) - 5e-4).abs() < 1e-12);
        assert!((a.lr_at(100) - 1e-3).abs() < 1e-12);
        assert!((a.lr_at(400) - 1e-3 * (100f64 / 400.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic_and_skips_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", 1, 2, Init::Normal(1.0), &mut rng);
        let f = store.add("frozen", 1, 2, Init::Normal(1.0), &mut rng);
        store.freeze_prefix("frozen");
        let frozen_vals = store.get(f).values.clone();
        let mut adam = Adam::new(0.05, 1, store.len());
        for _ in 0..500 {
            let mut grads = GradMap::new(store.len());
            let v = store.get(x).values.clone();
            grads.accumulate(x, &[2.0 * v[0], 2.0 * v[1]]);
            grads.accumulate(f, &[1.0, 1.0]);
            adam.step(&mut store, &grads);
        }
        assert!(store.get(x).values.iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(f).values, frozen_vals, "frozen untouched");
    }

    #[test]
    fn save_load_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("optim.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s1 = ParamStore::<f32>::new();
        let x = s1.add("x", 1, 3, Init::Normal(1.0), &mut rng);
        let mut s2 = ParamStore::<f32>::new();
        s2.add("x", 1, 3, Init::Zeros, &mut rng);
        s2.get_mut(x).values = s1.get(x).values.clone();

        let step = |store: &mut ParamStore<f32>, adam: &mut Adam| {
            let mut grads = GradMap::new(store.len());
            let v = store.get(x).values.clone();
            grads.accumulate(x, &[v[0], -v[1], 2.0 * v[2]]);
            adam.step(store, &grads);
        };
        let mut a1 = Adam::new(0.01, 5, s1.len());
        for _ in 0..7 {
            step(&mut s1, &mut a1);
        }
        a1.save(&path).unwrap();
        let mut a2 = Adam::new(0.01, 5, s2.len());
        for _ in 0..7 {
            step(&mut s2, &mut a2);
        }
        let mut a2b = Adam::new(0.01, 5, s2.len());
        a2b.load(&path).unwrap();
        assert_eq!(a2b.step_count(), 7);
        for _ in 0..5 {
            step(&mut s1, &mut a1);
            step(&mut s2, &mut a2b);
        }
        assert_eq!(s1.get(x).values, s2.get(x).values);
    }
}
