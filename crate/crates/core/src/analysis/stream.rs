//! Token streams and aligned log-probability sidecars, plus report output.

use std::collections::BTreeMap;
use std::io::Write;

use crate::analysis::recall::{Attribution, Slice, SliceReport};
use crate::datagen::read_records;
use crate::error::{Error, Result};
use crate::Token;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenStream {
    pub docs: Vec<Vec<Token>>,
    /// Per model name, one log-probability per token.
    pub logprobs: BTreeMap<String, Vec<Vec<f64>>>,
}

fn parse_lines<T: std::str::FromStr>(text: &str) -> Result<Vec<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|s| s.parse::<T>().map_err(|e| Error::Parse { line: i + 1, msg: format!("`{s}`: {e}") }))
                .collect()
        })
        .collect()
}

impl TokenStream {
    pub fn new(docs: Vec<Vec<Token>>) -> Self {
        TokenStream { docs, logprobs: BTreeMap::new() }
    }

    /// One document per line of space-separated ids, or generated MQAR
    /// records (recognized by their header line).
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let recs = read_records(text.as_bytes())?;
            return Ok(TokenStream::new(recs.into_iter().map(|r| r.tokens).collect()));
        }
        Ok(TokenStream::new(parse_lines(text)?))
    }

    /// Attaches a sidecar whose lines and positions align with the documents.
    pub fn attach_logprobs(&mut self, name: &str, text: &str) -> Result<()> {
        let lp: Vec<Vec<f64>> = parse_lines(text)?;
        self.attach_logprob_values(name, lp)
    }

    pub fn attach_logprob_values(&mut self, name: &str, lp: Vec<Vec<f64>>) -> Result<()> {
        if lp.len() != self.docs.len() {
            return Err(Error::shape(format!("{name}: {} log-prob lines for {} documents", lp.len(), self.docs.len())));
        }
        for (i, (l, d)) in lp.iter().zip(&self.docs).enumerate() {
            if l.len() != d.len() {
                return Err(Error::shape(format!("{name}: line {} has {} log-probs for {} tokens", i + 1, l.len(), d.len())));
            }
            if let Some(v) = l.iter().find(|v| !v.is_finite() || **v > 0.0) {
                return Err(Error::invalid(format!("{name}: line {} has log-prob {v}", i + 1)));
            }
        }
        self.logprobs.insert(name.to_string(), lp);
        Ok(())
    }

    pub fn logprobs(&self, name: &str) -> Result<&[Vec<f64>]> {
        self.logprobs.get(name).map(Vec::as_slice).ok_or_else(|| Error::invalid(format!("no log-probs for `{name}`")))
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x}"))
}

fn slice_fields(prefix: &str, s: &Slice, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.count"), s.count.to_string()));
    out.push((format!("{prefix}.mean_nll"), opt(s.mean_nll)));
    out.push((format!("{prefix}.perplexity"), opt(s.perplexity)));
}

/// Flat `key=value` fields for a report, in a fixed order.
pub fn report_fields(name: &str, r: &SliceReport) -> Vec<(String, String)> {
    let mut out = Vec::new();
    slice_fields(&format!("{name}.ar"), &r.ar, &mut out);
    slice_fields(&format!("{name}.other"), &r.other, &mut out);
    slice_fields(&format!("{name}.overall"), &r.overall, &mut out);
    out.push((format!("{name}.p_h"), r.p_h.to_string()));
    out
}

pub fn attribution_field(a: &Attribution) -> (String, String) {
    let v = match a {
        Attribution::Fraction(f) => f.to_string(),
        Attribution::UndefinedTie => "undefined (models tie overall)".to_string(),
    };
    ("attribution".into(), v)
}

pub fn write_record(fields: &[(String, String)], w: &mut impl Write) -> Result<()> {
    for (k, v) in fields {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}

/// One CSV row per (model, slice).
pub fn write_slices_csv(reports: &[(String, SliceReport)], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::invalid(format!("report csv: {e}"));
    csv.write_record(["model", "slice", "count", "mean_nll", "perplexity"]).map_err(err)?;
    for (name, r) in reports {
        for (slice, s) in [("ar", &r.ar), ("other", &r.other), ("overall", &r.overall)] {
            csv.write_record([name.as_str(), slice, &s.count.to_string(), &opt(s.mean_nll), &opt(s.perplexity)]).map_err(err)?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::recall::slice_perplexity;

    #[test]
    fn plain_and_sidecar() {
        let mut s = TokenStream::parse("1 2 3\n4 5\n").unwrap();
        assert_eq!(s.docs, vec![vec![1, 2, 3], vec![4, 5]]);
        assert!(s.attach_logprobs("m", "-1 -1 -1\n-2\n").is_err());
        assert!(s.attach_logprobs("m", "-1 -1 -1\n").is_err());
        s.attach_logprobs("m", "-1 -1 -1\n-2 -0.5\n").unwrap();
        assert_eq!(s.logprobs("m").unwrap()[1], vec![-2.0, -0.5]);
        assert!(matches!(TokenStream::parse("1 x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn record_and_csv() {
        let r = slice_perplexity(&[vec![-1.0, -1.0]], &[vec![]]).unwrap();
        let mut buf = Vec::new();
        write_record(&report_fields("m", &r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("m.ar.perplexity=undefined\n"));
        assert!(text.contains("m.other.count=2\n"));
        let mut buf = Vec::new();
        write_slices_csv(&[("m".into(), r)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
