//! Transition batches and their file formats.
//!
//! CSV header: `s_0..s_{d-1},beta,action,beta_a,reward,cost,sp_0..sp_{d-1},done`.
//! Binary: magic `BMTB`, `u32` version, `u32` state dimension, `u64` record
//! count, then per record `d` f64 state, f64 beta, u32 action, f64 beta_a,
//! f64 reward, f64 cost, `d` f64 next state, u8 done; all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{domain, Error, Result};
use crate::grid::BudgetGrid;
use crate::mdp::{AugmentedAction, BudgetedMdp, Transition};
use crate::qfunc::one_hot;

const MAGIC: &[u8; 4] = b"BMTB";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionBatch {
    state_dim: usize,
    transitions: Vec<Transition>,
}

impl TransitionBatch {
    pub fn new(state_dim: usize) -> Self {
        Self {
            state_dim,
            transitions: Vec::new(),
        }
    }

    pub fn from_transitions(state_dim: usize, transitions: Vec<Transition>) -> Result<Self> {
        let mut b = Self::new(state_dim);
        for t in transitions {
            b.push(t)?;
        }
        Ok(b)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(Error::Domain(format!(
                "transition state dimension differs from batch dimension {}",
                self.state_dim
            )));
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn extend(&mut self, other: TransitionBatch) -> Result<()> {
        for t in other.transitions {
            self.push(t)?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn truncate(&mut self, n: usize) {
        self.transitions.truncate(n);
    }

    pub fn header(&self) -> Vec<String> {
        let d = self.state_dim;
        (0..d)
            .map(|i| format!("s_{i}"))
            .chain(["beta", "action", "beta_a", "reward", "cost"].map(String::from))
            .chain((0..d).map(|i| format!("sp_{i}")))
            .chain(std::iter::once("done".to_string()))
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for t in &self.transitions {
            let mut rec: Vec<String> = t.state.iter().map(f64::to_string).collect();
            rec.push(t.budget.to_string());
            rec.push(t.action.action.to_string());
            rec.push(t.action.budget.to_string());
            rec.push(t.reward.to_string());
            rec.push(t.cost.to_string());
            rec.extend(t.next_state.iter().map(f64::to_string));
            rec.push(u8::from(t.terminal).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let cols = headers.len();
        if cols < 6 || (cols - 6) % 2 != 0 {
            return Err(Error::Format(
                "batch CSV has an unexpected column count".into(),
            ));
        }
        let d = (cols - 6) / 2;
        let mut batch = Self::new(d);
        if headers.iter().collect::<Vec<_>>() != batch.header() {
            return Err(Error::Format(
                "batch CSV header does not match the expected layout".into(),
            ));
        }
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {}: column {}: {e}", line + 1, &headers[i]))
                })
            };
            let state = (0..d).map(num).collect::<Result<Vec<_>>>()?;
            let action = rec[d + 1]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("row {}: action: {e}", line + 1)))?;
            let next_state = (d + 5..2 * d + 5).map(num).collect::<Result<Vec<_>>>()?;
            let terminal = match &rec[2 * d + 5] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Format(format!(
                        "row {}: done must be 0 or 1, got {other}",
                        line + 1
                    )))
                }
            };
            batch.push(Transition {
                state,
                budget: num(d)?,
                action: AugmentedAction::new(action, num(d + 2)?),
                reward: num(d + 3)?,
                cost: num(d + 4)?,
                next_state,
                terminal,
            })?;
        }
        Ok(batch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (8 * (2 * self.state_dim + 4) + 5));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in &self.transitions {
            let mut f = |x: f64| out.extend_from_slice(&x.to_le_bytes());
            t.state.iter().for_each(|x| f(*x));
            f(t.budget);
            out.extend_from_slice(&(t.action.action as u32).to_le_bytes());
            let mut f = |x: f64| out.extend_from_slice(&x.to_le_bytes());
            f(t.action.budget);
            f(t.reward);
            f(t.cost);
            t.next_state.iter().for_each(|x| f(*x));
            out.push(u8::from(t.terminal));
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("not a batch file".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported batch version {version}"
            )));
        }
        let d = c.u32()? as usize;
        let n = u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize;
        let record = 8 * (2 * d + 4) + 4 + 1;
        if buf.len() != 20 + n.saturating_mul(record) {
            return Err(Error::Format(
                "batch file length does not match its record count".into(),
            ));
        }
        let mut batch = Self::new(d);
        batch.transitions.reserve(n);
        for _ in 0..n {
            let state = (0..d).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            let budget = c.f64()?;
            let action = c.u32()? as usize;
            let beta_a = c.f64()?;
            let reward = c.f64()?;
            let cost = c.f64()?;
            let next_state = (0..d).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            let terminal = c.take(1)?[0] != 0;
            batch.transitions.push(Transition {
                state,
                budget,
                action: AugmentedAction::new(action, beta_a),
                reward,
                cost,
                next_state,
                terminal,
            });
        }
        Ok(batch)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads by extension: `.csv` as CSV, anything else as binary.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "csv") {
            Self::load_csv(path)
        } else {
            Self::load_binary(path)
        }
    }
}

/// Every `(s, a, β̃, s′)` of a finite model with one-hot states, each next
/// state repeated `P(s′|s, a) · unit` times so that empirical means over the
/// batch are exact expectations. Every probability must be a multiple of
/// `1/unit`.
pub fn full_coverage_batch(
    mdp: &BudgetedMdp,
    grid: &BudgetGrid,
    unit: usize,
) -> Result<TransitionBatch> {
    if unit == 0 {
        return domain("probability unit must be positive");
    }
    let n = mdp.n_states();
    let mut batch = TransitionBatch::new(n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            for &b in grid.values() {
                for (sp, &p) in mdp.next_distribution(s, a).iter().enumerate() {
                    let m = p * unit as f64;
                    let copies = m.round();
                    if (m - copies).abs() > 1e-9 {
                        return domain(format!(
                            "P({sp}|{s},{a}) = {p} is not a multiple of 1/{unit}"
                        ));
                    }
                    for _ in 0..copies as usize {
                        batch.transitions.push(Transition {
                            state: one_hot(s, n),
                            budget: b,
                            action: AugmentedAction::new(a, b),
                            reward: mdp.reward(s, a),
                            cost: mdp.cost(s, a),
                            next_state: one_hot(sp, n),
                            terminal: mdp.is_terminal(sp),
                        });
                    }
                }
            }
        }
    }
    Ok(batch)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("batch file is truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
