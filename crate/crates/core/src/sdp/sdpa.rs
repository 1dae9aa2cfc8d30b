//! SDPA sparse format (`.dat-s`).
//!
//! The instance's primal is written as the SDPA dual problem
//! `max F0•Y s.t. Fi•Y = c_i, Y ⪰ 0` with `F0 = -C`, `F_i = A_i` and
//! `c_i = b_i`; SDPA's primal variables are therefore `-y`, and SDPA reports
//! objective values with the opposite sign.
//!
//! Free variables are split as `x_k = u_k - v_k` with `u, v >= 0` stored in
//! one trailing diagonal block at positions `2k-1` and `2k`. Header comment
//! lines record that block and the block labels so that an exported file
//! imports back to the same instance.

use std::fmt::Write as _;

use thiserror::Error;

use super::{BlockEntry, BlockKind, BlockSpec, EqConstraint, SdpInstance};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("SDPA parse error at line {line}: {msg}")]
pub struct SdpaError {
    pub line: usize,
    pub msg: String,
}

const SPLIT_TAG: &str = "free-split-block:";
const LABEL_TAG: &str = "block-label:";

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sorts by position and merges duplicates; zero entries are dropped.
fn normalise(mut v: Vec<(usize, usize, usize, f64)>) -> Vec<(usize, usize, usize, f64)> {
    v.sort_by_key(|a| (a.0, a.1, a.2));
    let mut out: Vec<(usize, usize, usize, f64)> = Vec::with_capacity(v.len());
    for e in v {
        match out.last_mut() {
            Some(l) if (l.0, l.1, l.2) == (e.0, e.1, e.2) => l.3 += e.3,
            _ => out.push(e),
        }
    }
    out.retain(|e| e.3 != 0.0);
    out
}

pub fn export_sdpa(inst: &SdpInstance) -> Vec<u8> {
    let m = inst.constraints.len();
    let nf = inst.n_free;
    let n_blocks = inst.blocks.len() + usize::from(nf > 0);
    let split_block = inst.blocks.len(); // 0-based index of the split block
    let mut s = String::new();
    let _ = writeln!(s, "* SDPA sparse format; primal written as SDPA dual (F0 = -C, F_i = A_i, c = b)");
    if nf > 0 {
        let _ = writeln!(
            s,
            "* free variables split as x_k = u_k - v_k in diagonal block {}, entries 2k-1 and 2k",
            split_block + 1
        );
        let _ = writeln!(s, "* {SPLIT_TAG} {} {}", split_block + 1, nf);
    }
    for (i, b) in inst.blocks.iter().enumerate() {
        let _ = writeln!(s, "* {LABEL_TAG} {} {}", i + 1, b.label);
    }
    let _ = writeln!(s, "{m}");
    let _ = writeln!(s, "{n_blocks}");
    let mut dims: Vec<String> = inst
        .blocks
        .iter()
        .map(|b| match b.kind {
            BlockKind::Psd => b.dim.to_string(),
            BlockKind::Diag => format!("-{}", b.dim),
        })
        .collect();
    if nf > 0 {
        dims.push(format!("-{}", 2 * nf));
    }
    let _ = writeln!(s, "{}", dims.join(" "));
    let cs: Vec<String> = inst.constraints.iter().map(|c| fmt_num(c.rhs)).collect();
    let _ = writeln!(s, "{}", cs.join(" "));

    let block_lines = |entries: &[BlockEntry], sign: f64| -> Vec<(usize, usize, usize, f64)> {
        entries
            .iter()
            .map(|e| (e.block, e.i, e.j, sign * e.value))
            .collect()
    };
    let mut obj = block_lines(&inst.c_blocks, -1.0);
    for (k, &c) in inst.c_free.iter().enumerate() {
        obj.push((split_block, 2 * k, 2 * k, -c));
        obj.push((split_block, 2 * k + 1, 2 * k + 1, c));
    }
    let mut write_mat = |mat: usize, ent: Vec<(usize, usize, usize, f64)>| {
        for (b, i, j, v) in normalise(ent) {
            let _ = writeln!(s, "{mat} {} {} {} {}", b + 1, i + 1, j + 1, fmt_num(v));
        }
    };
    write_mat(0, obj);
    for (r, c) in inst.constraints.iter().enumerate() {
        let mut ent = block_lines(&c.entries, 1.0);
        for &(k, a) in &c.free {
            ent.push((split_block, 2 * k, 2 * k, a));
            ent.push((split_block, 2 * k + 1, 2 * k + 1, -a));
        }
        write_mat(r + 1, ent);
    }
    s.into_bytes()
}

fn tokens(line: &str) -> Vec<&str> {
    line.split(|c: char| c.is_whitespace() || "{}(),".contains(c))
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn import_sdpa(bytes: &[u8]) -> Result<SdpInstance, SdpaError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SdpaError {
        line: 1,
        msg: format!("invalid UTF-8: {e}"),
    })?;
    let err = |line: usize, msg: String| SdpaError { line, msg };
    let mut split: Option<(usize, usize)> = None;
    let mut labels: Vec<(usize, String)> = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();

    // leading comments
    while let Some(&(no, l)) = lines.peek() {
        let t = l.trim_start();
        if t.starts_with('*') || t.starts_with('"') {
            let body = t.trim_start_matches(['*', '"']).trim();
            if let Some(rest) = body.strip_prefix(SPLIT_TAG) {
                let v: Vec<usize> = rest
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| err(no, format!("bad {SPLIT_TAG} comment"))))
                    .collect::<Result<_, _>>()?;
                if v.len() != 2 || v[0] == 0 {
                    return Err(err(no, format!("bad {SPLIT_TAG} comment")));
                }
                split = Some((v[0] - 1, v[1]));
            } else if let Some(rest) = body.strip_prefix(LABEL_TAG) {
                let mut it = rest.trim().splitn(2, ' ');
                let idx = it.next().and_then(|x| x.parse::<usize>().ok());
                match (idx, it.next()) {
                    (Some(i), Some(lbl)) if i > 0 => labels.push((i - 1, lbl.trim().to_string())),
                    _ => return Err(err(no, format!("bad {LABEL_TAG} comment"))),
                }
            }
            lines.next();
        } else if t.is_empty() {
            lines.next();
        } else {
            break;
        }
    }

    let mut next_line = |what: &str| -> Result<(usize, Vec<String>), SdpaError> {
        for (no, l) in lines.by_ref() {
            let toks: Vec<String> = tokens(l).into_iter().map(String::from).collect();
            if !toks.is_empty() {
                return Ok((no, toks));
            }
        }
        Err(err(text.lines().count() + 1, format!("unexpected end of file, expected {what}")))
    };
    let parse_count = |no: usize, toks: &[String], what: &str| -> Result<usize, SdpaError> {
        toks.first()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| err(no, format!("malformed {what}")))
    };

    let (no, toks) = next_line("mDIM")?;
    let m = parse_count(no, &toks, "mDIM")?;
    let (no, toks) = next_line("nBLOCK")?;
    let nblock = parse_count(no, &toks, "block count (nBLOCK)")?;
    if nblock == 0 {
        return Err(err(no, "malformed block count (nBLOCK): must be positive".into()));
    }
    let (no, toks) = next_line("block structure")?;
    if toks.len() < nblock {
        return Err(err(no, format!("block structure lists {} sizes, expected {nblock}", toks.len())));
    }
    let mut sizes = Vec::with_capacity(nblock);
    for t in &toks[..nblock] {
        let v: i64 = t
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0 && *v != 0.0)
            .map(|v| v as i64)
            .ok_or_else(|| err(no, format!("bad block size `{t}`")))?;
        sizes.push(v);
    }
    let mut rhs = Vec::with_capacity(m);
    while rhs.len() < m {
        let (no, toks) = next_line("objective vector")?;
        for t in toks {
            if rhs.len() == m {
                break;
            }
            rhs.push(t.parse::<f64>().map_err(|_| err(no, format!("bad number `{t}`")))?);
        }
    }

    if let Some((b, nf)) = split {
        if b >= nblock || sizes[b] != -(2 * nf as i64) {
            return Err(err(1, "free-split block does not match block structure".into()));
        }
    }
    let mut blocks = Vec::new();
    let mut block_map = vec![usize::MAX; nblock];
    for (bi, &sz) in sizes.iter().enumerate() {
        if split.is_some_and(|(b, _)| b == bi) {
            continue;
        }
        block_map[bi] = blocks.len();
        let label = labels
            .iter()
            .find(|(i, _)| *i == bi)
            .map(|(_, l)| l.clone())
            .unwrap_or_else(|| format!("block{}", bi + 1));
        blocks.push(BlockSpec {
            label,
            dim: sz.unsigned_abs() as usize,
            kind: if sz > 0 { BlockKind::Psd } else { BlockKind::Diag },
        });
    }
    let n_free = split.map_or(0, |(_, nf)| nf);
    let mut inst = SdpInstance {
        n_free,
        blocks,
        constraints: rhs
            .into_iter()
            .map(|b| EqConstraint {
                rhs: b,
                ..Default::default()
            })
            .collect(),
        c_free: vec![0.0; n_free],
        c_blocks: Vec::new(),
    };

    for (no, l) in lines {
        let toks = tokens(l);
        if toks.is_empty() || toks[0].starts_with('*') || toks[0].starts_with('"') {
            continue;
        }
        if toks.len() != 5 {
            return Err(err(no, format!("expected 5 fields, found {}", toks.len())));
        }
        let ints: Vec<usize> = toks[..4]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| err(no, format!("bad index `{t}`"))))
            .collect::<Result<_, _>>()?;
        let v: f64 = toks[4]
            .parse()
            .map_err(|_| err(no, format!("bad number `{}`", toks[4])))?;
        let (mat, blk, i, j) = (ints[0], ints[1], ints[2], ints[3]);
        if mat > m {
            return Err(err(no, format!("matrix index {mat} exceeds mDIM {m}")));
        }
        if blk == 0 || blk > nblock {
            return Err(err(no, format!("block index {blk} out of range")));
        }
        let dim = sizes[blk - 1].unsigned_abs() as usize;
        if i == 0 || j == 0 || i > dim || j > dim {
            return Err(err(no, format!("entry ({i}, {j}) outside block of size {dim}")));
        }
        if sizes[blk - 1] < 0 && i != j {
            return Err(err(no, "off-diagonal entry in diagonal block".into()));
        }
        if split.is_some_and(|(b, _)| b == blk - 1) {
            // odd position carries the coefficient, even position its negation
            if i % 2 == 0 {
                continue;
            }
            let k = (i - 1) / 2;
            if mat == 0 {
                inst.c_free[k] += -v;
            } else {
                inst.constraints[mat - 1].free.push((k, v));
            }
            continue;
        }
        let e = BlockEntry::new(block_map[blk - 1], i - 1, j - 1, if mat == 0 { -v } else { v });
        if mat == 0 {
            inst.c_blocks.push(e);
        } else {
            inst.constraints[mat - 1].entries.push(e);
        }
    }
    Ok(inst)
}
