//! Adaptive Dormand–Prince 5(4) with projection after accepted steps and
//! the native continuous extension of order four.


pub trait OdeSystem: Sync {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Pulls an accepted state back onto the constraint set.
    fn project(&self, _y: &mut [f64]) {}
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Continuous extension over one accepted step.
#[derive(Clone, Debug)]
pub struct Segment {
    pub t0: f64,
    pub h: f64,
    /// Five coefficient blocks of length `dim`, stored contiguously.
    cont: Vec<f64>,
}

impl Segment {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = out.len();
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let c = &self.cont;
        for i in 0..n {
            out[i] = c[i] + s * (c[n + i] + s1 * (c[2 * n + i] + s * (c[3 * n + i] + s1 * c[4 * n + i])));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

pub struct Dopri5<'a, S: OdeSystem + ?Sized> {
    sys: &'a S,
    pub t: f64,
    pub y: Vec<f64>,
    k: [Vec<f64>; 7],
    h: f64,
    pub tol: f64,
    pub stats: StepStats,
    pub last: Option<Segment>,
    ytmp: Vec<f64>,
    y1: Vec<f64>,
}

fn rms_norm(err: &[f64], y0: &[f64], y1: &[f64], tol: f64) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = tol + tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

impl<'a, S: OdeSystem + ?Sized> Dopri5<'a, S> {
    pub fn new(sys: &'a S, t0: f64, y0: &[f64], tol: f64, direction_scale: f64) -> Self {
        let n = sys.dim();
        assert_eq!(y0.len(), n);
        let mut y = y0.to_vec();
        sys.project(&mut y);
        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        sys.rhs(t0, &y, &mut k[0]);
        let mut this = Self {
            sys,
            t: t0,
            y,
            k,
            h: 0.0,
            tol,
            stats: StepStats { accepted: 0, rejected: 0, evaluations: 1 },
            last: None,
            ytmp: vec![0.0; n],
            y1: vec![0.0; n],
        };
        this.h = this.initial_step(direction_scale);
        this
    }

    /// Initial step heuristic of Hairer, Nørsett and Wanner.
    fn initial_step(&mut self, span: f64) -> f64 {
        let n = self.y.len();
        let sc: Vec<f64> = self.y.iter().map(|v| self.tol + self.tol * v.abs()).collect();
        let d0 = (self.y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (self.k[0].iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span.abs());
        for i in 0..n {
            self.ytmp[i] = self.y[i] + h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; n];
        self.sys.rhs(self.t + h0, &self.ytmp, &mut f1);
        self.stats.evaluations += 1;
        let d2 = (f1
            .iter()
            .zip(&self.k[0])
            .zip(&sc)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(span.abs())
    }

    fn stages(&mut self, h: f64) {
        let n = self.y.len();
        for s in 1..7 {
            for i in 0..n {
                let mut acc = self.y[i];
                for j in 0..s {
                    acc += h * A[s][j] * self.k[j][i];
                }
                self.ytmp[i] = acc;
            }
            let (head, tail) = self.k.split_at_mut(s);
            let _ = head;
            self.sys.rhs(self.t + C[s] * h, &self.ytmp, &mut tail[0]);
            if s == 6 {
                self.y1.copy_from_slice(&self.ytmp);
            }
        }
        self.stats.evaluations += 6;
    }

    /// One accepted step not passing `t_end`. Returns true once `t_end` is reached.
    pub fn step(&mut self, t_end: f64) -> Result<bool, StepFailure> {
        let n = self.y.len();
        loop {
            let remaining = t_end - self.t;
            if remaining <= 1e-15 * self.t.abs().max(1.0) {
                return Ok(true);
            }
            let mut h = self.h.min(remaining);
            let last_step = h >= remaining * (1.0 - 1e-12);
            if last_step {
                h = remaining;
            }
            if h < 1e-14 * self.t.abs().max(1.0) {
                return Err(StepFailure { t: self.t, message: format!("step size underflow (h = {h:e})") });
            }
            self.stages(h);
            let err: Vec<f64> = (0..n)
                .map(|i| h * (0..7).map(|s| E[s] * self.k[s][i]).sum::<f64>())
                .collect();
            let en = rms_norm(&err, &self.y, &self.y1, self.tol);
            if !en.is_finite() {
                self.h = h * 0.1;
                self.stats.rejected += 1;
                continue;
            }
            let fac = (0.9 * en.max(1e-10).powf(-0.2)).clamp(0.2, 10.0);
            if en <= 1.0 {
                let mut cont = vec![0.0; 5 * n];
                for i in 0..n {
                    let ydiff = self.y1[i] - self.y[i];
                    let bspl = h * self.k[0][i] - ydiff;
                    cont[i] = self.y[i];
                    cont[n + i] = ydiff;
                    cont[2 * n + i] = bspl;
                    cont[3 * n + i] = ydiff - h * self.k[6][i] - bspl;
                    cont[4 * n + i] = h * (0..7).map(|s| D[s] * self.k[s][i]).sum::<f64>();
                }
                self.last = Some(Segment { t0: self.t, h, cont });
                self.t = if last_step { t_end } else { self.t + h };
                self.y.copy_from_slice(&self.y1);
                self.sys.project(&mut self.y);
                let t = self.t;
                self.sys.rhs(t, &self.y, &mut self.k[0]);
                self.stats.evaluations += 1;
                self.stats.accepted += 1;
                self.h = h * fac;
                return Ok(last_step);
            }
            self.stats.rejected += 1;
            self.h = h * fac.min(1.0);
        }
    }

    /// A single unadaptive fifth-order step of length `h` from the current state,
    /// followed by projection. The stepper itself is not advanced.
    pub fn trial_step(&mut self, h: f64) -> Vec<f64> {
        let saved: Vec<f64> = self.k[0].clone();
        self.stages(h);
        let mut out = self.y1.clone();
        self.k[0] = saved;
        self.sys.project(&mut out);
        out
    }
}

/// All accepted steps of an integration with their continuous extensions.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    pub stats: StepStats,
}

impl DenseSolution {
    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if self.segments.is_empty() {
            out.copy_from_slice(&self.states[0]);
            return out;
        }
        let idx = match self.segments.binary_search_by(|s| s.t0.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        let idx = idx.min(self.segments.len() - 1);
        if t >= self.segments[idx].t1() && idx + 1 == self.segments.len() {
            out.copy_from_slice(self.states.last().unwrap());
            return out;
        }
        self.segments[idx].eval_into(t, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct StepFailure {
    pub t: f64,
    pub message: String,
}

/// Failure of a whole integration, carrying everything computed before it.
#[derive(Clone, Debug)]
pub struct IntegrationError {
    pub failure: StepFailure,
    pub partial: DenseSolution,
}

pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: f64,
) -> Result<DenseSolution, Box<IntegrationError>> {
    let mut stepper = Dopri5::new(sys, t0, y0, tol, t1 - t0);
    let mut sol = DenseSolution {
        dim: sys.dim(),
        times: vec![t0],
        states: vec![stepper.y.clone()],
        segments: Vec::new(),
        stats: stepper.stats,
    };
    let max_steps = 5_000_000;
    loop {
        let done = match stepper.step(t1) {
            Ok(d) => d,
            Err(failure) => return Err(Box::new(IntegrationError { failure, partial: sol })),
        };
        if let Some(seg) = stepper.last.take() {
            sol.segments.push(seg);
            sol.times.push(stepper.t);
            sol.states.push(stepper.y.clone());
        }
        if done {
            break;
        }
        if sol.segments.len() > max_steps {
            let failure = StepFailure { t: stepper.t, message: "step budget exhausted".into() };
            return Err(Box::new(IntegrationError { failure, partial: sol }));
        }
    }
    sol.stats = stepper.stats;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
    }

    #[test]
    fn harmonic_oscillator_endpoint() {
        let sol = integrate(&Oscillator, 0.0, &[1.0, 0.0], 2.0 * std::f64::consts::PI, 1e-12).unwrap();
        let y = sol.states.last().unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9);
    }

    #[test]
    fn dense_output_is_fourth_order_accurate() {
        let sol = integrate(&Oscillator, 0.0, &[1.0, 0.0], 10.0, 1e-10).unwrap();
        for i in 0..200 {
            let t = 10.0 * i as f64 / 199.0;
            let y = sol.eval(t);
            assert!((y[0] - t.cos()).abs() < 1e-8, "t = {t}: {}", y[0] - t.cos());
        }
    }

    #[test]
    fn trial_step_matches_accepted_step() {
        let mut st = Dopri5::new(&Oscillator, 0.0, &[1.0, 0.0], 1e-10, 1.0);
        let y0 = st.y.clone();
        let trial = st.trial_step(0.05);
        assert!((trial[0] - 0.05f64.cos()).abs() < 1e-10);
        assert_eq!(st.y, y0);
    }
}
