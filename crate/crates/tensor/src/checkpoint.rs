//! Text checkpoint container.
//!
//! Floats are written as the hex of their IEEE-754 bits so a save/load
//! round trip is bit-exact. Layout:
//!
//! ```text
//! ssnav-checkpoint v1
//! meta <key> <value>
//! version <param store version>
//! param <name> <dim> [<dim> ...]
//! <hex> <hex> ...
//! optimizer adam <beta1> <beta2> <eps> <step>   | optimizer sgd <step>
//! moment1 <param index>
//! <hex> ...
//! moment2 <param index>
//! <hex> ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::{Optimizer, OptimizerKind, ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_HEADER: &str = "ssnav-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form tags (model kind, ablation flags, seed).
    pub meta: IndexMap<String, String>,
    pub params: ParamStore,
    pub optimizer: Option<Optimizer>,
}

fn hex_line(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 17);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{:016x}", v.to_bits()).unwrap();
    }
    s
}

fn fmt_err(line: usize, msg: impl Into<String>) -> TensorError {
    TensorError::Format {
        line,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        writeln!(out, "version {}", self.params.version()).unwrap();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "param {name} {}", dims.join(" ")).unwrap();
            out.push_str(&hex_line(t.data()));
            out.push('\n');
        }
        if let Some(opt) = &self.optimizer {
            match opt.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => writeln!(
                    out,
                    "optimizer adam {} {}",
                    hex_line(&[beta1, beta2, eps]),
                    opt.step
                )
                .unwrap(),
                OptimizerKind::Sgd => writeln!(out, "optimizer sgd {}", opt.step).unwrap(),
            }
            for (i, m) in opt.first_moment.iter().enumerate() {
                writeln!(out, "moment1 {i}").unwrap();
                out.push_str(&hex_line(m));
                out.push('\n');
            }
            for (i, v) in opt.second_moment.iter().enumerate() {
                writeln!(out, "moment2 {i}").unwrap();
                out.push_str(&hex_line(v));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h == CHECKPOINT_HEADER => {}
            Some((n, h)) => return Err(fmt_err(n, format!("unsupported header `{h}`"))),
            None => return Err(fmt_err(0, "empty checkpoint")),
        }
        let parse_hex = |n: usize, line: Option<(usize, &str)>, expected: usize| -> Result<Vec<f64>> {
            let (n, line) = line.ok_or_else(|| fmt_err(n, "missing value line"))?;
            let vals = line
                .split_whitespace()
                .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| fmt_err(n, e.to_string()))?;
            if vals.len() != expected {
                return Err(fmt_err(n, format!("expected {expected} values, got {}", vals.len())));
            }
            Ok(vals)
        };
        let mut meta = IndexMap::new();
        let mut params = ParamStore::new();
        let mut version = 0;
        let mut optimizer: Option<Optimizer> = None;
        let mut ended = false;
        while let Some((n, line)) = lines.next() {
            let mut words = line.split_whitespace();
            let tag = words.next().unwrap_or("");
            match tag {
                "meta" => {
                    let key = words.next().ok_or_else(|| fmt_err(n, "meta without key"))?;
                    let value = line
                        .splitn(3, ' ')
                        .nth(2)
                        .unwrap_or("")
                        .to_string();
                    meta.insert(key.to_string(), value);
                }
                "version" => {
                    version = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| fmt_err(n, "bad version"))?;
                }
                "param" => {
                    let name = words.next().ok_or_else(|| fmt_err(n, "param without name"))?;
                    let shape = words
                        .map(|w| w.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| fmt_err(n, e.to_string()))?;
                    let len = shape.iter().product();
                    let data = parse_hex(n, lines.next(), len)?;
                    params.insert(name, Tensor::new(shape, data)?)?;
                }
                "optimizer" => {
                    let kind = words.next().unwrap_or("");
                    let rest: Vec<&str> = words.collect();
                    let (kind, step) = match (kind, rest.as_slice()) {
                        ("adam", [b1, b2, eps, step]) => {
                            let h = |w: &str| {
                                u64::from_str_radix(w, 16)
                                    .map(f64::from_bits)
                                    .map_err(|e| fmt_err(n, e.to_string()))
                            };
                            (
                                OptimizerKind::Adam {
                                    beta1: h(b1)?,
                                    beta2: h(b2)?,
                                    eps: h(eps)?,
                                },
                                *step,
                            )
                        }
                        ("sgd", [step]) => (OptimizerKind::Sgd, *step),
                        _ => return Err(fmt_err(n, "bad optimizer line")),
                    };
                    let mut opt = Optimizer::new(kind, &params);
                    opt.step = step.parse().map_err(|_| fmt_err(n, "bad optimizer step"))?;
                    optimizer = Some(opt);
                }
                "moment1" | "moment2" => {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| fmt_err(n, "moment before optimizer"))?;
                    let idx: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| fmt_err(n, "bad moment index"))?;
                    let buf = if tag == "moment1" {
                        opt.first_moment.get_mut(idx)
                    } else {
                        opt.second_moment.get_mut(idx)
                    }
                    .ok_or_else(|| fmt_err(n, "moment index out of range"))?;
                    *buf = parse_hex(n, lines.next(), buf.len())?;
                }
                "end" => {
                    ended = true;
                    break;
                }
                "" => {}
                other => return Err(fmt_err(n, format!("unknown record `{other}`"))),
            }
        }
        if !ended {
            return Err(fmt_err(0, "truncated checkpoint (no `end`)"));
        }
        params.set_version(version);
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
