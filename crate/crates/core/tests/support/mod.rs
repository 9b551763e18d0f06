//! Reference implementations used as test oracles. They are written
//! directly from the update equations with plain vectors and loops and share
//! no code with the library.

#![allow(dead_code)]

/// Dense parameters of a network laid out `[IO | Cf | Cs]`.
#[derive(Debug, Clone)]
pub struct NaiveNet {
    pub n_io: usize,
    pub n_cf: usize,
    pub n_cs: usize,
    pub tau: [f64; 3],
    /// Row-major, `w[i][j]` is j -> i.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub cs0: Vec<Vec<f64>>,
}

impl NaiveNet {
    pub fn size(&self) -> usize {
        self.n_io + self.n_cf + self.n_cs
    }

    fn tau_of(&self, i: usize) -> f64 {
        if i < self.n_io {
            self.tau[0]
        } else if i < self.n_io + self.n_cf {
            self.tau[1]
        } else {
            self.tau[2]
        }
    }

    /// Teacher-forced loss of one sequence: mean squared error between the
    /// output after consuming frame t and frame t+1. With `posture_clamp` the
    /// IO potentials start at `atanh` of the clamped first frame, else at 0.
    pub fn sequence_loss(&self, seq_index: usize, seq: &[Vec<f64>], posture_clamp: Option<f64>) -> f64 {
        let n = self.size();
        let mut u = vec![0.0; n];
        if let Some(c) = posture_clamp {
            for i in 0..self.n_io {
                u[i] = seq[0][i].clamp(-c, c).atanh();
            }
        }
        for k in 0..self.n_cs {
            u[self.n_io + self.n_cf + k] = self.cs0[seq_index][k];
        }
        let mut y: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        let mut sum = 0.0;
        for t in 0..seq.len() - 1 {
            let mut z = y.clone();
            z[..self.n_io].copy_from_slice(&seq[t]);
            let mut next = vec![0.0; n];
            for i in 0..n {
                let mut drive = self.b[i];
                for j in 0..n {
                    drive += self.w[i][j] * z[j];
                }
                let tau = self.tau_of(i);
                next[i] = (1.0 - 1.0 / tau) * u[i] + drive / tau;
            }
            u = next;
            y = u.iter().map(|v| v.tanh()).collect();
            for i in 0..self.n_io {
                sum += (y[i] - seq[t + 1][i]).powi(2);
            }
        }
        sum / ((seq.len() - 1) * self.n_io) as f64
    }

    pub fn loss(&self, seqs: &[Vec<Vec<f64>>], posture_clamp: Option<f64>) -> f64 {
        let total: f64 = seqs.iter().enumerate().map(|(k, s)| self.sequence_loss(k, s, posture_clamp)).sum();
        total / seqs.len() as f64
    }
}

/// Relative error with a floor so that two near-zero values compare as equal.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Closed-form two-link planar inverse kinematics; `elbow` is +1 or -1.
pub fn two_link_inverse(l1: f64, l2: f64, x: f64, y: f64, elbow: f64) -> [f64; 2] {
    let c2 = ((x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = elbow * c2.acos();
    let q1 = y.atan2(x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    [q1, q2]
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Bitwise CRC-16/CCITT-FALSE.
pub fn crc16(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        for bit in (0..8).rev() {
            let top = (crc >> 15) & 1;
            let input = ((b >> bit) & 1) as u16;
            crc <<= 1;
            if top ^ input == 1 {
                crc ^= 0x1021;
            }
        }
    }
    crc
}
