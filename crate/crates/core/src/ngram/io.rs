use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{CountTable, Method, NgramError, NgramModel, Result};

const VERSION: u32 = 1;

impl NgramModel {
    /// Text format: a header `order<TAB>method<TAB>params`, then one
    /// `context… token count` line per n-gram of every order, shortest first.
    /// Discounts in the header are informational; loading re-derives them.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let disc: Vec<String> = self
            .discounts
            .iter()
            .map(|d| d.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(","))
            .collect();
        writeln!(
            w,
            "{}\t{}\tversion={VERSION} vocab={} discounts={}",
            self.order,
            self.method.name(),
            self.vocab_size,
            disc.join("/")
        )?;
        for level in &self.counts.levels {
            let sorted: BTreeMap<&Vec<u32>, &BTreeMap<u32, u64>> = level.iter().collect();
            for (h, succ) in sorted {
                for (t, c) in succ {
                    for id in h {
                        write!(w, "{id} ")?;
                    }
                    writeln!(w, "{t} {c}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let bad = |line: usize, msg: &str| NgramError::Format {
            line,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let header = header?;
        let f: Vec<&str> = header.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(1, "expected order<TAB>method<TAB>params"));
        }
        let order: usize = f[0].parse().map_err(|_| bad(1, "bad order"))?;
        let method: Method = f[1].parse().map_err(|e: String| bad(1, &e))?;
        let mut vocab = None;
        for kv in f[2].split(' ') {
            match kv.split_once('=') {
                Some(("version", v)) if v != VERSION.to_string() => {
                    return Err(bad(1, &format!("unsupported version {v}")))
                }
                Some(("vocab", v)) => vocab = Some(v.parse::<usize>().map_err(|_| bad(1, "bad vocab size"))?),
                _ => {}
            }
        }
        let vocab = vocab.ok_or_else(|| bad(1, "missing vocab size"))?;
        if !(1..=5).contains(&order) {
            return Err(NgramError::Order(order));
        }
        let mut counts = CountTable {
            order,
            levels: vec![Default::default(); order],
        };
        for (i, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let nums: Vec<u64> = line
                .split(' ')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 1, "expected integers"))?;
            if nums.len() < 2 || nums.len() > order + 1 {
                return Err(bad(i + 1, "wrong n-gram length"));
            }
            let (count, ids) = nums.split_last().expect("len >= 2");
            let ids: Vec<u32> = ids
                .iter()
                .map(|&x| u32::try_from(x).ok().filter(|&t| (t as usize) < vocab))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(i + 1, "token id out of range"))?;
            let (tok, h) = ids.split_last().expect("non-empty");
            let prev = counts.levels[h.len()]
                .entry(h.to_vec())
                .or_default()
                .insert(*tok, *count);
            if prev.is_some() || *count == 0 {
                return Err(bad(i + 1, "duplicate or zero count"));
            }
        }
        NgramModel::from_counts(counts, method, vocab)
    }
}
