//! Squash-free routing by agreement, vectorized over spatial locations.
//!
//! Predictions are laid out `[N, I, J, D, L]` (input type, output type, capsule
//! dimension, flattened location). Routing runs independently per sample and
//! per location.

use crate::real::Real;

/// Shape of a routing problem for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteDims {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub dim: usize,
    pub locations: usize,
    pub iters: usize,
}

impl RouteDims {
    fn pred_len(&self) -> usize {
        self.inputs * self.outputs * self.dim * self.locations
    }

    fn coupling_len(&self) -> usize {
        self.inputs * self.outputs * self.locations
    }

    fn out_len(&self) -> usize {
        self.outputs * self.dim * self.locations
    }
}

/// Per-iteration couplings and outputs, saved for inspection and for the backward pass.
#[derive(Debug, Clone)]
pub struct RouteTrace<T> {
    /// `[iter][N, I, J, L]`
    pub couplings: Vec<Vec<T>>,
    /// `[iter][N, J, D, L]`
    pub outputs: Vec<Vec<T>>,
}

fn softmax_over_outputs<T: Real>(logits: &[T], c: &mut [T], inputs: usize, outputs: usize, l: usize) {
    for i in 0..inputs {
        let rows = &logits[i * outputs * l..(i + 1) * outputs * l];
        let dst = &mut c[i * outputs * l..(i + 1) * outputs * l];
        for loc in 0..l {
            let mut m = T::neg_infinity();
            for j in 0..outputs {
                m = m.max(rows[j * l + loc]);
            }
            let mut z = T::zero();
            for j in 0..outputs {
                let e = (rows[j * l + loc] - m).exp();
                dst[j * l + loc] = e;
                z += e;
            }
            for j in 0..outputs {
                dst[j * l + loc] /= z;
            }
        }
    }
}

/// Runs `iters` rounds of routing; returns the final outputs `[N, J, D, L]` and the trace.
pub fn route_forward<T: Real>(d: &RouteDims, pred: &[T]) -> (Vec<T>, RouteTrace<T>) {
    let (ni, nj, nd, l) = (d.inputs, d.outputs, d.dim, d.locations);
    let mut couplings = vec![Vec::with_capacity(d.batch * d.coupling_len()); d.iters];
    let mut outputs = vec![Vec::with_capacity(d.batch * d.out_len()); d.iters];
    let mut logits = vec![T::zero(); d.coupling_len()];
    let mut c = vec![T::zero(); d.coupling_len()];
    let mut s = vec![T::zero(); d.out_len()];
    for n in 0..d.batch {
        let u = &pred[n * d.pred_len()..(n + 1) * d.pred_len()];
        logits.iter_mut().for_each(|b| *b = T::zero());
        for t in 0..d.iters {
            softmax_over_outputs(&logits, &mut c, ni, nj, l);
            s.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..ni {
                for j in 0..nj {
                    let cij = &c[(i * nj + j) * l..(i * nj + j + 1) * l];
                    for k in 0..nd {
                        let uijk = &u[((i * nj + j) * nd + k) * l..((i * nj + j) * nd + k + 1) * l];
                        let sjk = &mut s[(j * nd + k) * l..(j * nd + k + 1) * l];
                        for loc in 0..l {
                            sjk[loc] += cij[loc] * uijk[loc];
                        }
                    }
                }
            }
            if t + 1 < d.iters {
                for i in 0..ni {
                    for j in 0..nj {
                        let bij = &mut logits[(i * nj + j) * l..(i * nj + j + 1) * l];
                        for k in 0..nd {
                            let uijk = &u[((i * nj + j) * nd + k) * l..((i * nj + j) * nd + k + 1) * l];
                            let sjk = &s[(j * nd + k) * l..(j * nd + k + 1) * l];
                            for loc in 0..l {
                                bij[loc] += uijk[loc] * sjk[loc];
                            }
                        }
                    }
                }
            }
            couplings[t].extend_from_slice(&c);
            outputs[t].extend_from_slice(&s);
        }
    }
    let out = outputs[d.iters - 1].clone();
    (out, RouteTrace { couplings, outputs })
}

/// Gradient of the routed output with respect to the predictions, differentiating
/// through every routing iteration (couplings included).
pub fn route_backward<T: Real>(d: &RouteDims, pred: &[T], trace: &RouteTrace<T>, grad_out: &[T]) -> Vec<T> {
    let (ni, nj, nd, l) = (d.inputs, d.outputs, d.dim, d.locations);
    let mut du = vec![T::zero(); pred.len()];
    let mut gb = vec![T::zero(); d.coupling_len()];
    let mut gs = vec![T::zero(); d.out_len()];
    let mut gc = vec![T::zero(); d.coupling_len()];
    for n in 0..d.batch {
        let u = &pred[n * d.pred_len()..(n + 1) * d.pred_len()];
        let dun = &mut du[n * d.pred_len()..(n + 1) * d.pred_len()];
        gb.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..d.iters).rev() {
            let c = &trace.couplings[t][n * d.coupling_len()..(n + 1) * d.coupling_len()];
            let s = &trace.outputs[t][n * d.out_len()..(n + 1) * d.out_len()];
            if t + 1 == d.iters {
                gs.copy_from_slice(&grad_out[n * d.out_len()..(n + 1) * d.out_len()]);
            } else {
                gs.iter_mut().for_each(|v| *v = T::zero());
                // b_{t+1} = b_t + Σ_k u·s_t
                for i in 0..ni {
                    for j in 0..nj {
                        let gbij = &gb[(i * nj + j) * l..(i * nj + j + 1) * l];
                        for k in 0..nd {
                            let off = ((i * nj + j) * nd + k) * l;
                            let so = (j * nd + k) * l;
                            for loc in 0..l {
                                dun[off + loc] += gbij[loc] * s[so + loc];
                                gs[so + loc] += gbij[loc] * u[off + loc];
                            }
                        }
                    }
                }
            }
            // s_t = Σ_i c_t·u
            gc.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..ni {
                for j in 0..nj {
                    let co = (i * nj + j) * l;
                    for k in 0..nd {
                        let off = ((i * nj + j) * nd + k) * l;
                        let so = (j * nd + k) * l;
                        for loc in 0..l {
                            gc[co + loc] += gs[so + loc] * u[off + loc];
                            dun[off + loc] += c[co + loc] * gs[so + loc];
                        }
                    }
                }
            }
            // c_t = softmax_j(b_t); gb accumulates the residual path and the softmax path
            for i in 0..ni {
                for loc in 0..l {
                    let mut dotp = T::zero();
                    for j in 0..nj {
                        let idx = (i * nj + j) * l + loc;
                        dotp += c[idx] * gc[idx];
                    }
                    for j in 0..nj {
                        let idx = (i * nj + j) * l + loc;
                        gb[idx] += c[idx] * (gc[idx] - dotp);
                    }
                }
            }
        }
    }
    du
}
