use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

/// Adam with bias correction, one moment pair per weight matrix and bias.
#[derive(Clone, Debug)]
pub struct Adam {
    params: AdamParams,
    lr: f64,
    t: i32,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(params: AdamParams, lr: f64, shapes: &[(usize, usize)]) -> Self {
        let moments = shapes
            .iter()
            .map(|&(i, o)| Moments {
                mw: Array2::zeros((i, o)),
                vw: Array2::zeros((i, o)),
                mb: Array1::zeros(o),
                vb: Array1::zeros(o),
            })
            .collect();
        Self {
            params,
            lr,
            t: 0,
            moments,
        }
    }

    pub fn step<'a>(
        &mut self,
        layers: impl Iterator<
            Item = (
                &'a mut Array2<f64>,
                &'a mut Array1<f64>,
                &'a Array2<f64>,
                &'a Array1<f64>,
            ),
        >,
    ) {
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for ((w, b, gw, gb), mom) in layers.zip(self.moments.iter_mut()) {
            Zip::from(w)
                .and(&mut mom.mw)
                .and(&mut mom.vw)
                .and(gw)
                .for_each(update);
            Zip::from(b)
                .and(&mut mom.mb)
                .and(&mut mom.vb)
                .and(gb)
                .for_each(update);
        }
    }
}
