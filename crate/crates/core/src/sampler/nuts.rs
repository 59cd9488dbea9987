//! One No-U-Turn transition with multinomial trajectory sampling and the
//! generalized U-turn criterion, including checks across subtree seams.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Target;
use crate::rng::StreamRng;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

pub(crate) struct Integrator<'a, T: Target + ?Sized> {
    pub target: &'a T,
    pub inv_mass: Vec<f64>,
    pub step_size: f64,
    pub max_depth: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionStats {
    pub accept: f64,
    pub divergent: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct TreeState {
    divergent: bool,
    leapfrogs: usize,
    sum_metro: f64,
}

impl<'a, T: Target + ?Sized> Integrator<'a, T> {
    pub(crate) fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(pi, m)| pi * pi * m).sum::<f64>()
    }

    pub(crate) fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    pub(crate) fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_mass).map(|(pi, m)| pi * m).collect()
    }

    pub(crate) fn sample_momentum(&self, p: &mut [f64], rng: &mut StreamRng) {
        for (pi, m) in p.iter_mut().zip(&self.inv_mass) {
            let z: f64 = rng.sample(StandardNormal);
            *pi = z / m.sqrt();
        }
    }

    pub(crate) fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_mass) {
            *q += eps * m * p;
        }
        z.logp = self.target.logp_and_grad(&z.q, &mut z.grad);
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        st: &mut TreeState,
        rng: &mut StreamRng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step_size);
            st.leapfrogs += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_ENERGY_ERROR {
                st.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, h0 - h);
            st.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !st.divergent;
        }

        let dim = z.q.len();
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
            st,
            rng,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
            st,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let mut rho_subtree = rho_init.clone();
        add_into(&mut rho_subtree, &rho_final);
        add_into(rho, &rho_subtree);

        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut rho_ext = rho_init;
        add_into(&mut rho_ext, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let mut rho_ext = rho_final;
        add_into(&mut rho_ext, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    /// Draws fresh momentum at `current` and returns the next state.
    pub(crate) fn transition(&self, current: &Point, rng: &mut StreamRng) -> (Point, TransitionStats) {
        let dim = current.q.len();
        let mut z = current.clone();
        self.sample_momentum(&mut z.p, rng);
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = self.p_sharp(&z.p);
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.hamiltonian(&z);
        let mut depth = 0;
        let mut st = TreeState {
            divergent: false,
            leapfrogs: 0,
            sum_metro: 0.0,
        };

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                z.clone_from(&z_fwd);
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    &mut st,
                    rng,
                );
                z_fwd.clone_from(&z);
                ok
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                z.clone_from(&z_bck);
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    &mut st,
                    rng,
                );
                z_bck.clone_from(&z);
                ok
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);

            rho.clone_from(&rho_bck);
            add_into(&mut rho, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let mut rho_ext = rho_bck.clone();
            add_into(&mut rho_ext, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let mut rho_ext = rho_fwd.clone();
            add_into(&mut rho_ext, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        let accept = if st.leapfrogs > 0 {
            st.sum_metro / st.leapfrogs as f64
        } else {
            0.0
        };
        (
            z_sample,
            TransitionStats {
                accept,
                divergent: st.divergent,
            },
        )
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance of 0.8.
    pub(crate) fn init_step_size(&mut self, current: &Point, rng: &mut StreamRng) -> Result<(), String> {
        let threshold = 0.8f64.ln();
        let mut z = current.clone();
        let delta = |this: &Self, z: &mut Point, rng: &mut StreamRng| {
            z.clone_from(current);
            this.sample_momentum(&mut z.p, rng);
            let h0 = this.hamiltonian(z);
            this.leapfrog(z, this.step_size);
            h0 - this.hamiltonian(z)
        };
        let direction = if delta(self, &mut z, rng) > threshold {
            1.0
        } else {
            -1.0
        };
        loop {
            let d = delta(self, &mut z, rng);
            if (direction == 1.0 && !(d > threshold)) || (direction == -1.0 && !(d < threshold)) {
                break;
            }
            self.step_size = if direction == 1.0 {
                2.0 * self.step_size
            } else {
                0.5 * self.step_size
            };
            if self.step_size > 1e7 {
                return Err("posterior is improper: step size diverged to infinity".into());
            }
            if self.step_size == 0.0 {
                return Err("no acceptable step size: density is not finite near the current point".into());
            }
        }
        Ok(())
    }
}
