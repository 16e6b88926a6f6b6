//! Line-oriented dataset file.
//!
//! ```text
//! ssl-vqa-dataset <TAB> version=1 <TAB> answers=A <TAB> tokens=T <TAB> feature_dim=F
//!     <TAB> object_slots=O <TAB> pad_len=L <TAB> vote_count=V <TAB> train=N <TAB> test=M
//!     <TAB> spec=<json>
//! answer <TAB> <id> <TAB> <string>          (A lines)
//! token <TAB> <id> <TAB> <string>           (T lines)
//! <split> <TAB> <id> <TAB> <template> <TAB> <qtype> <TAB> <token ids>
//!     <TAB> <features> <TAB> <answer:count ...> <TAB> <true answer>   (N + M lines)
//! ```
//!
//! Floats are written with 17 significant digits so they round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{check_instance, Dataset, Image, Instance, QType, WorldSpec};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ssl-vqa-dataset";
const HEADER_KEYS: [&str; 10] = [
    "version",
    "answers",
    "tokens",
    "feature_dim",
    "object_slots",
    "pad_len",
    "vote_count",
    "train",
    "test",
    "spec",
];

pub(crate) fn fmt_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

pub fn write_string(d: &Dataset) -> Result<String> {
    let spec = serde_json::to_string(&d.spec).map_err(|e| Error::invalid("world spec", e.to_string()))?;
    let mut out = String::new();
    writeln!(
        out,
        "{MAGIC}\tversion={FORMAT_VERSION}\tanswers={}\ttokens={}\tfeature_dim={}\tobject_slots={}\tpad_len={}\tvote_count={}\ttrain={}\ttest={}\tspec={spec}",
        d.answer_vocab.len(),
        d.question_vocab.len(),
        d.spec.feature_dim,
        d.spec.object_slots,
        d.spec.pad_len,
        d.spec.vote_count,
        d.train.len(),
        d.test.len(),
    )
    .unwrap();
    for (kind, vocab) in [("answer", &d.answer_vocab), ("token", &d.question_vocab)] {
        for (i, s) in vocab.iter().enumerate() {
            if s.contains(['\t', '\n']) {
                return Err(Error::invalid(
                    "vocabulary",
                    format!("{kind} {i} contains a tab or newline"),
                ));
            }
            writeln!(out, "{kind}\t{i}\t{s}").unwrap();
        }
    }
    for (split, insts) in [("train", &d.train), ("test", &d.test)] {
        for inst in insts.iter() {
            write_instance(&mut out, split, inst);
        }
    }
    Ok(out)
}

fn write_instance(out: &mut String, split: &str, inst: &Instance) {
    write!(out, "{split}\t{}\t{}\t{}\t", inst.id, inst.template_id, inst.qtype).unwrap();
    for (i, t) in inst.tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{t}").unwrap();
    }
    out.push('\t');
    for (i, &v) in inst.image.data.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        fmt_float(out, v);
    }
    out.push('\t');
    for (i, (a, c)) in inst.votes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{a}:{c}").unwrap();
    }
    writeln!(out, "\t{}", inst.true_answer).unwrap();
}

pub fn write(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, write_string(d)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Dataset> {
    read_str(&fs::read_to_string(path)?)
}

fn parse_num<T: FromStr>(line: usize, record: Option<u64>, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, record, format!("bad {what} `{s}`")))
}

fn parse_list<T: FromStr>(line: usize, record: Option<u64>, what: &str, s: &str) -> Result<Vec<T>> {
    s.split(' ').map(|p| parse_num(line, record, what, p)).collect()
}

struct Header {
    answers: usize,
    tokens: usize,
    feature_dim: usize,
    object_slots: usize,
    pad_len: usize,
    vote_count: u32,
    train: usize,
    test: usize,
    spec: WorldSpec,
}

fn parse_header(text: &str) -> Result<Header> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::parse(1, None, "not a dataset file (bad magic)"));
    }
    if fields.len() != HEADER_KEYS.len() + 1 {
        return Err(Error::parse(
            1,
            None,
            format!("header has {} fields, expected {}", fields.len(), HEADER_KEYS.len() + 1),
        ));
    }
    let mut values = Vec::new();
    for (field, key) in fields[1..].iter().zip(HEADER_KEYS) {
        match field.split_once('=') {
            Some((k, v)) if k == key => values.push(v),
            _ => return Err(Error::parse(1, None, format!("expected `{key}=...`, found `{field}`"))),
        }
    }
    let version: u32 = parse_num(1, None, "version", values[0])?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(1, None, format!("unsupported version {version}")));
    }
    let spec: WorldSpec =
        serde_json::from_str(values[9]).map_err(|e| Error::parse(1, None, format!("bad spec echo: {e}")))?;
    let h = Header {
        answers: parse_num(1, None, "answer count", values[1])?,
        tokens: parse_num(1, None, "token count", values[2])?,
        feature_dim: parse_num(1, None, "feature_dim", values[3])?,
        object_slots: parse_num(1, None, "object_slots", values[4])?,
        pad_len: parse_num(1, None, "pad_len", values[5])?,
        vote_count: parse_num(1, None, "vote_count", values[6])?,
        train: parse_num(1, None, "train count", values[7])?,
        test: parse_num(1, None, "test count", values[8])?,
        spec,
    };
    if (h.feature_dim, h.object_slots, h.pad_len, h.vote_count)
        != (
            h.spec.feature_dim,
            h.spec.object_slots,
            h.spec.pad_len,
            h.spec.vote_count,
        )
    {
        return Err(Error::parse(1, None, "header fields disagree with the spec echo"));
    }
    h.spec
        .validate()
        .map_err(|e| Error::parse(1, None, format!("invalid spec echo: {e}")))?;
    Ok(h)
}

pub fn read_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| Error::parse(1, None, "empty file"))?;
    let h = parse_header(first)?;

    let mut read_vocab = |kind: &str, n: usize| -> Result<Vec<String>> {
        let mut vocab = Vec::with_capacity(n);
        for i in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(0, None, format!("truncated file: missing {kind} {i}")))?;
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            if parts.len() != 3 || parts[0] != kind || parts[1] != i.to_string() {
                return Err(Error::parse(ln, None, format!("expected `{kind}\\t{i}\\t<string>`")));
            }
            vocab.push(parts[2].to_string());
        }
        Ok(vocab)
    };
    let answer_vocab = read_vocab("answer", h.answers)?;
    let question_vocab = read_vocab("token", h.tokens)?;

    let mut train = Vec::with_capacity(h.train);
    let mut test = Vec::with_capacity(h.test);
    let mut ids = std::collections::HashSet::new();
    let mut last_line = 1 + h.answers + h.tokens;
    for (ln, line) in lines {
        last_line = ln;
        let fields: Vec<&str> = line.split('\t').collect();
        let record = fields.get(1).and_then(|s| s.parse::<u64>().ok());
        if fields.len() > 8 {
            return Err(Error::parse(ln, record, "unknown trailing field"));
        }
        if fields.len() < 8 {
            return Err(Error::parse(
                ln,
                record,
                format!("truncated record: {} of 8 fields", fields.len()),
            ));
        }
        let id: u64 = parse_num(ln, None, "instance id", fields[1])?;
        let r = Some(id);
        let qtype: QType = fields[3].parse().map_err(|e: String| Error::parse(ln, r, e))?;
        let image_data: Vec<f64> = parse_list(ln, r, "feature", fields[5])?;
        if image_data.len() != h.object_slots * h.feature_dim {
            return Err(Error::parse(
                ln,
                r,
                format!(
                    "truncated record: {} features, expected {}",
                    image_data.len(),
                    h.object_slots * h.feature_dim
                ),
            ));
        }
        let votes = fields[6]
            .split(' ')
            .map(|pair| {
                let (a, c) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::parse(ln, r, format!("bad vote `{pair}`")))?;
                Ok((parse_num(ln, r, "answer id", a)?, parse_num(ln, r, "vote count", c)?))
            })
            .collect::<Result<Vec<(usize, u32)>>>()?;
        let inst = Instance {
            id,
            template_id: parse_num(ln, r, "template id", fields[2])?,
            qtype,
            tokens: parse_list(ln, r, "token id", fields[4])?,
            image: Image {
                rows: h.object_slots,
                cols: h.feature_dim,
                data: image_data,
            },
            votes,
            true_answer: parse_num(ln, r, "true answer", fields[7])?,
        };
        if !inst.votes.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::parse(ln, r, "votes must be sorted by answer id without repeats"));
        }
        check_instance(&inst, &h.spec, h.answers, h.tokens).map_err(|e| Error::parse(ln, r, e))?;
        if !ids.insert(id) {
            return Err(Error::parse(ln, r, "duplicate instance id"));
        }
        match fields[0] {
            "train" if test.is_empty() => train.push(inst),
            "test" => test.push(inst),
            "train" => return Err(Error::parse(ln, r, "train record after test records")),
            other => return Err(Error::parse(ln, r, format!("unknown split `{other}`"))),
        }
    }
    if train.len() != h.train || test.len() != h.test {
        return Err(Error::parse(
            last_line,
            None,
            format!(
                "truncated file: {} train / {} test records, header promises {} / {}",
                train.len(),
                test.len(),
                h.train,
                h.test
            ),
        ));
    }
    Ok(Dataset {
        answer_vocab,
        question_vocab,
        train,
        test,
        spec: h.spec,
    })
}
