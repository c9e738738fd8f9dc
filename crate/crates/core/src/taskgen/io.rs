//! Plain-text bank serialization.
//!
//! ```text
//! mlti-bank v1 gaussian-classes
//! seed 9
//! pool_seed 9
//! param classes 12
//! param radius 2.0000000000000000e0
//! pool train 3 7 1
//! pool test 0 5
//! class 0 <dim values>
//! ```
//!
//! Glyph banks write one `glyph` record per base glyph plus one `task`
//! (transform) or `object` (glyph, scale) record per task. Reals use 17
//! significant digits, so import reproduces the bank exactly.

use std::fmt::Write as _;

use super::glyph::{Transform, GLYPH_COUNT, TRANSFORM_COMBOS};
use super::{BankData, BankError, BankSpec, TaskBank};

const MAGIC: &str = "mlti-bank v1";

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_reals(v: &[f64]) -> String {
    v.iter().map(|x| real(*x)).collect::<Vec<_>>().join(" ")
}

fn join_ids(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn export_bank(bank: &TaskBank) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {}", bank.spec.kind_name());
    let _ = writeln!(s, "seed {}", bank.seed);
    let _ = writeln!(s, "pool_seed {}", bank.pool_seed);
    match &bank.spec {
        BankSpec::GaussianClasses {
            classes,
            dim,
            radius,
            noise,
            samples_per_class,
            shift,
            ..
        } => {
            let _ = writeln!(s, "param classes {classes}");
            let _ = writeln!(s, "param dim {dim}");
            let _ = writeln!(s, "param radius {}", real(*radius));
            let _ = writeln!(s, "param noise {}", real(*noise));
            let spc = samples_per_class.map_or("none".to_string(), |v| v.to_string());
            let _ = writeln!(s, "param samples_per_class {spc}");
            let _ = writeln!(s, "param shift {}", real(*shift));
        }
        BankSpec::GlyphGrid { grid, noise, .. } | BankSpec::RotationRegression { grid, noise, .. } => {
            let _ = writeln!(s, "param grid {grid}");
            let _ = writeln!(s, "param noise {}", real(*noise));
        }
    }
    let _ = writeln!(s, "pool train {}", join_ids(&bank.meta_train_pool));
    let _ = writeln!(s, "pool test {}", join_ids(&bank.meta_test_pool));
    match &bank.data {
        BankData::Gaussian { means } => {
            for (c, m) in means.iter().enumerate() {
                let _ = writeln!(s, "class {c} {}", join_reals(m));
            }
        }
        BankData::Glyph { glyphs } => {
            for (g, bits) in glyphs.iter().enumerate() {
                let _ = writeln!(s, "glyph {g} {}", join_reals(bits));
            }
            for t in 0..TRANSFORM_COMBOS {
                let tr = Transform::from_index(t);
                let _ = writeln!(
                    s,
                    "task {t} {} {} {}",
                    if tr.half_scale { "half" } else { "full" },
                    90 * u32::from(tr.quarter_turns),
                    real(tr.tint_value())
                );
            }
        }
        BankData::Rotation { glyphs } => {
            for (g, bits) in glyphs.iter().enumerate() {
                let _ = writeln!(s, "glyph {g} {}", join_reals(bits));
            }
            for o in 0..2 * GLYPH_COUNT {
                let scale = if o >= GLYPH_COUNT { "half" } else { "full" };
                let _ = writeln!(s, "object {o} {} {scale}", o % GLYPH_COUNT);
            }
        }
    }
    s
}

struct Parser<'a> {
    line: usize,
    fields: Vec<&'a str>,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> BankError {
        BankError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn arg(&self, i: usize) -> Result<&'a str, BankError> {
        self.fields
            .get(i)
            .copied()
            .ok_or_else(|| self.err(format!("missing field {i}")))
    }

    fn parse<T: std::str::FromStr>(&self, i: usize) -> Result<T, BankError> {
        let raw = self.arg(i)?;
        raw.parse()
            .map_err(|_| self.err(format!("cannot parse {raw:?}")))
    }

    fn rest<T: std::str::FromStr>(&self, from: usize) -> Result<Vec<T>, BankError> {
        (from..self.fields.len()).map(|i| self.parse(i)).collect()
    }
}

pub fn import_bank(text: &str) -> Result<TaskBank, BankError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(BankError::Parse {
        line: 1,
        message: "empty input".into(),
    })?;
    let kind = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or(BankError::Parse {
            line: 1,
            message: format!("expected header `{MAGIC} <kind>`"),
        })?;
    let mut seed = None;
    let mut pool_seed = None;
    let mut params: std::collections::BTreeMap<String, (usize, String)> = Default::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut records: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut glyph_records: Vec<(usize, Vec<f64>)> = Vec::new();
    for (n, raw) in lines {
        let p = Parser {
            line: n + 1,
            fields: raw.split_whitespace().collect(),
        };
        match p.arg(0)? {
            "seed" => seed = Some(p.parse::<u64>(1)?),
            "pool_seed" => pool_seed = Some(p.parse::<u64>(1)?),
            "param" => {
                params.insert(p.arg(1)?.to_string(), (p.line, p.arg(2)?.to_string()));
            }
            "pool" => match p.arg(1)? {
                "train" => train = p.rest(2)?,
                "test" => test = p.rest(2)?,
                other => return Err(p.err(format!("unknown pool {other:?}"))),
            },
            "class" => records.push((p.parse(1)?, p.rest(2)?)),
            "glyph" => glyph_records.push((p.parse(1)?, p.rest(2)?)),
            "task" => {
                let id: usize = p.parse(1)?;
                let t = Transform::from_index(id);
                let scale = if t.half_scale { "half" } else { "full" };
                let tint: f64 = p.parse(4)?;
                if id >= TRANSFORM_COMBOS
                    || p.arg(2)? != scale
                    || p.parse::<u32>(3)? != 90 * u32::from(t.quarter_turns)
                    || tint != t.tint_value()
                {
                    return Err(p.err(format!("task {id} does not match its transform")));
                }
            }
            "object" => {
                let id: usize = p.parse(1)?;
                let scale = if id >= GLYPH_COUNT { "half" } else { "full" };
                if id >= 2 * GLYPH_COUNT || p.parse::<usize>(2)? != id % GLYPH_COUNT || p.arg(3)? != scale {
                    return Err(p.err(format!("object {id} does not match its glyph/scale")));
                }
            }
            other => return Err(p.err(format!("unknown record {other:?}"))),
        }
    }
    let missing = |what: &str| BankError::Parse {
        line: 0,
        message: format!("missing {what}"),
    };
    let get = |key: &str| -> Result<(usize, String), BankError> {
        params.get(key).cloned().ok_or_else(|| missing(&format!("param {key}")))
    };
    let num = |key: &str| -> Result<f64, BankError> {
        let (line, v) = get(key)?;
        v.parse().map_err(|_| BankError::Parse {
            line,
            message: format!("param {key}: cannot parse {v:?}"),
        })
    };
    let int = |key: &str| -> Result<usize, BankError> {
        let (line, v) = get(key)?;
        v.parse().map_err(|_| BankError::Parse {
            line,
            message: format!("param {key}: cannot parse {v:?}"),
        })
    };
    let ordered = |mut recs: Vec<(usize, Vec<f64>)>, count: usize, what: &str| {
        recs.sort_by_key(|(id, _)| *id);
        if recs.len() != count || recs.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(missing(&format!("{what} records 0..{count}")));
        }
        Ok(recs.into_iter().map(|(_, v)| v).collect::<Vec<_>>())
    };
    let (spec, data) = match kind {
        "gaussian-classes" => {
            let classes = int("classes")?;
            let dim = int("dim")?;
            let spc = match get("samples_per_class")?.1.as_str() {
                "none" => None,
                _ => Some(int("samples_per_class")?),
            };
            let means = ordered(records, classes, "class")?;
            if means.iter().any(|m| m.len() != dim) {
                return Err(missing(&format!("{dim} values per class")));
            }
            (
                BankSpec::GaussianClasses {
                    classes,
                    dim,
                    radius: num("radius")?,
                    noise: num("noise")?,
                    samples_per_class: spc,
                    shift: num("shift")?,
                    train_count: train.len(),
                    test_count: test.len(),
                },
                BankData::Gaussian { means },
            )
        }
        "glyph-grid" | "rotation-regression" => {
            let grid = int("grid")?;
            let glyphs = ordered(glyph_records, GLYPH_COUNT, "glyph")?;
            if glyphs.iter().any(|g| g.len() != grid * grid) {
                return Err(missing(&format!("{} values per glyph", grid * grid)));
            }
            let noise = num("noise")?;
            if kind == "glyph-grid" {
                (
                    BankSpec::GlyphGrid {
                        grid,
                        noise,
                        train_count: train.len(),
                        test_count: test.len(),
                    },
                    BankData::Glyph { glyphs },
                )
            } else {
                (
                    BankSpec::RotationRegression {
                        grid,
                        noise,
                        train_count: train.len(),
                        test_count: test.len(),
                    },
                    BankData::Rotation { glyphs },
                )
            }
        }
        other => {
            return Err(BankError::Parse {
                line: 1,
                message: format!("unknown bank kind {other:?}"),
            })
        }
    };
    let bank = TaskBank {
        spec,
        seed: seed.ok_or_else(|| missing("seed"))?,
        data,
        pool_seed: pool_seed.ok_or_else(|| missing("pool_seed"))?,
        meta_train_pool: train,
        meta_test_pool: test,
    };
    let total = bank.total();
    if bank
        .meta_train_pool
        .iter()
        .chain(&bank.meta_test_pool)
        .any(|&id| id >= total)
        || bank.meta_train_pool.iter().any(|id| bank.meta_test_pool.contains(id))
    {
        return Err(missing("disjoint in-range pools"));
    }
    Ok(bank)
}
