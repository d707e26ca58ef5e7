//! Plain-text model files.
//!
//! A header of `key value...` lines, one `layer` line per encoder layer, then
//! each parameter as `param <name> <rows> <cols>` followed by one line per
//! row. Floats use Rust's shortest round-trip formatting, so a save/load
//! cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use gradgraph::ParamStore;
use ndarray::Array2;

use super::{LayerSpec, ModelConfig, ModelParams};
use crate::error::{parse_err, ApenError, Result};

const MAGIC: &str = "apen-model 1";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_model(params: &ModelParams) -> String {
    let c = &params.config;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "d {}", c.d);
    let _ = writeln!(s, "k0 {}", c.k0);
    let _ = writeln!(s, "hidden {}", join(&c.hidden));
    let _ = writeln!(s, "post {}", join(&c.post));
    let _ = writeln!(s, "decoder_width {}", c.decoder_width);
    let _ = writeln!(s, "head_hidden {}", c.head_hidden);
    let _ = writeln!(s, "classes {}", c.classes);
    let _ = writeln!(s, "task {}", c.task);
    let _ = writeln!(s, "fisher {}", c.fisher);
    let _ = writeln!(s, "damping {}", c.damping);
    let _ = writeln!(s, "seed {}", c.seed);
    for l in &c.layers {
        let _ = writeln!(
            s,
            "layer {} {} {} {} {} {} {} {}",
            l.a_in, l.b_in, l.a_out, l.b_out, l.sigma, l.tau, l.em_iters, l.merge_freq
        );
    }
    for (name, t) in params.store.iter() {
        let _ = writeln!(s, "param {name} {} {}", t.nrows(), t.ncols());
        for row in t.rows() {
            let _ = writeln!(s, "{}", join(&row.to_vec()));
        }
    }
    s
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, write_model(params))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    parse_model(&std::fs::read_to_string(path)?)
}

fn num<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T> {
    tok.parse().or_else(|_| parse_err(line, format!("bad number `{tok}`")))
}

fn nums<T: std::str::FromStr>(line: usize, toks: &[&str]) -> Result<Vec<T>> {
    toks.iter().map(|t| num(line, t)).collect()
}

pub fn parse_model(text: &str) -> Result<ModelParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((no, _)) => return parse_err(no, "not a model file"),
        None => return parse_err(1, "empty model file"),
    }
    let mut c = ModelConfig::desk(3, 1);
    c.layers.clear();
    let mut store = ParamStore::new();
    let mut pending: Option<(usize, String, usize, Vec<Vec<f64>>, usize)> = None;
    for (no, line) in lines {
        if let Some((start, name, rows, mut acc, cols)) = pending.take() {
            let row: Vec<f64> = nums(no, &line.split_whitespace().collect::<Vec<_>>())?;
            if row.len() != cols {
                return parse_err(no, format!("expected {cols} values, found {}", row.len()));
            }
            acc.push(row);
            if acc.len() < rows {
                pending = Some((start, name, rows, acc, cols));
            } else {
                let t = Array2::from_shape_vec((rows, cols), acc.concat()).expect("row lengths checked");
                store.insert(name, t).or_else(|e| parse_err(start, e.to_string()))?;
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let args = &toks[1..];
        let one = || -> Result<&str> {
            match args {
                [v] => Ok(v),
                _ => parse_err(no, format!("`{}` takes one value", toks[0])),
            }
        };
        match toks[0] {
            "d" => c.d = num(no, one()?)?,
            "k0" => c.k0 = num(no, one()?)?,
            "hidden" => c.hidden = nums(no, args)?,
            "post" => c.post = nums(no, args)?,
            "decoder_width" => c.decoder_width = num(no, one()?)?,
            "head_hidden" => c.head_hidden = num(no, one()?)?,
            "classes" => c.classes = num(no, one()?)?,
            "task" => c.task = one()?.parse().or_else(|e: ApenError| parse_err(no, e.to_string()))?,
            "fisher" => c.fisher = one()?.parse().or_else(|e: ApenError| parse_err(no, e.to_string()))?,
            "damping" => c.damping = num(no, one()?)?,
            "seed" => c.seed = num(no, one()?)?,
            "layer" => {
                if args.len() != 8 {
                    return parse_err(no, "`layer` takes 8 values");
                }
                c.layers.push(LayerSpec {
                    a_in: num(no, args[0])?,
                    b_in: num(no, args[1])?,
                    a_out: num(no, args[2])?,
                    b_out: num(no, args[3])?,
                    sigma: num(no, args[4])?,
                    tau: num(no, args[5])?,
                    em_iters: num(no, args[6])?,
                    merge_freq: num(no, args[7])?,
                });
            }
            "param" => {
                let [name, rows, cols] = args else {
                    return parse_err(no, "`param` takes a name and two sizes");
                };
                let (rows, cols): (usize, usize) = (num(no, rows)?, num(no, cols)?);
                if rows == 0 {
                    store
                        .insert(*name, Array2::zeros((0, cols)))
                        .or_else(|e| parse_err(no, e.to_string()))?;
                } else {
                    pending = Some((no, name.to_string(), rows, Vec::with_capacity(rows), cols));
                }
            }
            other => return parse_err(no, format!("unknown key `{other}`")),
        }
    }
    if let Some((start, name, ..)) = pending {
        return parse_err(start, format!("parameter `{name}` is truncated"));
    }
    c.validate()?;
    let expected = ModelParams::init(c.clone())?;
    for (name, t) in expected.store.iter() {
        match store.get(name) {
            Some(v) if v.dim() == t.dim() => {}
            Some(v) => {
                return Err(ApenError::InvalidConfiguration(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    v.dim(),
                    t.dim()
                )))
            }
            None => return Err(ApenError::InvalidConfiguration(format!("parameter `{name}` is missing"))),
        }
    }
    if store.len() != expected.store.len() {
        return Err(ApenError::InvalidConfiguration("model file has unexpected parameters".into()));
    }
    Ok(ModelParams { config: c, store })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let mut c = ModelConfig::desk(2, 3);
        c.hidden = vec![4];
        c.post = vec![];
        c.layers.truncate(2);
        ModelParams::init(c).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = small();
        let back = parse_model(&write_model(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = write_model(&small()).replacen("k0 16", "k0 sixty", 1);
        match parse_model(&text) {
            Err(ApenError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let cut: String = write_model(&small()).lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_model(&cut), Err(ApenError::Parse { .. })));
    }
}
