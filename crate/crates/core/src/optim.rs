//! Adam optimizer over named parameter sets.

use crate::error::Result;
use crate::params::ParameterSet;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Adam with bias correction, β = (0.9, 0.999), no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients missing a parameter are treated as
    /// zero for that parameter (its moments still decay).
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        for (name, value) in params.iter_mut() {
            let zero = || ArrayD::zeros(value.raw_dim());
            let m = self.m.entry(name.clone()).or_insert_with(zero);
            let v = self.v.entry(name.clone()).or_insert_with(zero);
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let ps = value.as_slice_mut().unwrap();
            match grads.get(name) {
                Some(g) => {
                    let gs = g.as_slice().unwrap();
                    for i in 0..ps.len() {
                        ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                        vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                None => {
                    for i in 0..ps.len() {
                        ms[i] *= self.beta1;
                        vs[i] *= self.beta2;
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes moment tensors (plus the step counter) for checkpoints.
    pub fn export_state(&self, prefix: &str, out: &mut BTreeMap<String, ArrayD<f64>>) {
        for (name, m) in &self.m {
            out.insert(format!("{prefix}m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            out.insert(format!("{prefix}v.{name}"), v.clone());
        }
    }

    /// Restores moments exported by [`Adam::export_state`].
    pub fn import_state(
        &mut self,
        prefix: &str,
        step: u64,
        tensors: &BTreeMap<String, ArrayD<f64>>,
    ) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        let mp = format!("{prefix}m.");
        let vp = format!("{prefix}v.");
        for (name, t) in tensors {
            if let Some(stripped) = name.strip_prefix(&mp) {
                self.m.insert(stripped.to_string(), t.clone());
            } else if let Some(stripped) = name.strip_prefix(&vp) {
                self.v.insert(stripped.to_string(), t.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut p = ParameterSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.25]).unwrap(),
        );
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap();
        // unit-magnitude Adam step at t=1 regardless of gradient scale
        assert!(w[IxDyn(&[0])] < 1.0);
        assert!(w[IxDyn(&[1])] > 1.0);
    }

    #[test]
    fn state_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[3]), 0.5));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[3]), 0.1));
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &grads).unwrap();

        let mut dump = BTreeMap::new();
        opt.export_state("opt.", &mut dump);
        let mut opt2 = Adam::new(0.01);
        opt2.import_state("opt.", opt.step_count(), &dump);

        let mut pa = p.clone();
        let mut pb = p.clone();
        opt.step(&mut pa, &grads).unwrap();
        opt2.step(&mut pb, &grads).unwrap();
        assert_eq!(pa.get("w").unwrap(), pb.get("w").unwrap());
    }
}
