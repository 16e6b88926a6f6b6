//! Parameter file: a versioned header, the spec echo, one line per tensor
//! and a closing line with the tensor count.
//!
//! ```text
//! ssl-vqa-params <TAB> version=1
//! spec <TAB> <json>
//! weight <TAB> <name> <TAB> <d0,d1,..> <TAB> <values>
//! buffer <TAB> <name> <TAB> <d0,d1,..> <TAB> <values>
//! end <TAB> <count>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ModelSpec, Params};
use crate::autodiff::{ParamSet, Tensor};
use crate::data::fmt_float;
use crate::error::{Error, Result};

const MAGIC: &str = "ssl-vqa-params";
const VERSION: u32 = 1;

pub fn save_string(params: &Params) -> Result<String> {
    let spec = serde_json::to_string(&params.spec).map_err(|e| Error::invalid("model spec", e.to_string()))?;
    let mut out = format!("{MAGIC}\tversion={VERSION}\nspec\t{spec}\n");
    let mut count = 0;
    for (kind, set) in [("weight", &params.weights), ("buffer", &params.buffers)] {
        for (name, t) in set.iter() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(out, "{kind}\t{name}\t{}\t", shape.join(",")).unwrap();
            for (i, &v) in t.data().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                fmt_float(&mut out, v);
            }
            out.push('\n');
            count += 1;
        }
    }
    writeln!(out, "end\t{count}").unwrap();
    Ok(out)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    fs::write(path, save_string(params)?)?;
    Ok(())
}

/// Loads parameters; with `expected`, the stored spec must match it exactly.
pub fn load(path: &Path, expected: Option<&ModelSpec>) -> Result<Params> {
    load_str(&fs::read_to_string(path)?, expected)
}

pub fn load_str(text: &str, expected: Option<&ModelSpec>) -> Result<Params> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == format!("{MAGIC}\tversion={VERSION}") => {}
        _ => return Err(Error::parse(1, None, "not a parameter file (bad header)")),
    }
    let spec: ModelSpec = match lines.next() {
        Some((ln, l)) => {
            let json = l
                .strip_prefix("spec\t")
                .ok_or_else(|| Error::parse(ln, None, "expected spec line"))?;
            serde_json::from_str(json).map_err(|e| Error::parse(ln, None, format!("bad spec: {e}")))?
        }
        None => return Err(Error::parse(2, None, "truncated file: missing spec")),
    };
    if let Some(exp) = expected {
        if exp != &spec {
            return Err(Error::invalid(
                "params",
                format!("stored spec {spec:?} does not match expected {exp:?}"),
            ));
        }
    }

    let mut weights = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut count = 0usize;
    let mut ended = false;
    let mut last = 2;
    for (ln, line) in lines {
        last = ln;
        if ended {
            return Err(Error::parse(ln, None, "content after end marker"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["end", n] => {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::parse(ln, None, format!("bad tensor count `{n}`")))?;
                if n != count {
                    return Err(Error::parse(
                        ln,
                        None,
                        format!("end marker says {n} tensors, read {count}"),
                    ));
                }
                ended = true;
            }
            [kind @ ("weight" | "buffer"), name, shape, values] => {
                let shape: Vec<usize> = shape
                    .split(',')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| Error::parse(ln, None, format!("bad shape `{shape}`")))
                    })
                    .collect::<Result<_>>()?;
                let data: Vec<f64> = values
                    .split(' ')
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::parse(ln, None, format!("bad value `{v}` in `{name}`")))
                    })
                    .collect::<Result<_>>()?;
                let t = Tensor::new(shape, data).map_err(|e| Error::parse(ln, None, format!("`{name}`: {e}")))?;
                if !t.is_finite() {
                    return Err(Error::parse(ln, None, format!("`{name}` holds non-finite values")));
                }
                let set = if *kind == "weight" { &mut weights } else { &mut buffers };
                if set.contains(name) {
                    return Err(Error::parse(ln, None, format!("duplicate tensor `{name}`")));
                }
                set.insert(*name, t);
                count += 1;
            }
            _ => return Err(Error::parse(ln, None, "unrecognized line")),
        }
    }
    if !ended {
        return Err(Error::parse(last, None, "truncated file: missing end marker"));
    }
    let params = Params { spec, weights, buffers };
    params.check_layout()?;
    Ok(params)
}
