//! Line-oriented text records for sequence samples.
//!
//! One record per line:
//!
//! ```text
//! id=17 task=2 labels=0x4,1x6,0x10 segments=4-10:2
//! ```
//!
//! `labels` is a run-length encoding of the frame labels (`value x count`),
//! `segments` lists `start-end:domain` with `end` exclusive, separated by `;`
//! (`-` when empty). `task` is a stage index, `test` or `buffer`.

use crate::error::{Error, Result};
use crate::streams::synth::{Segment, SequenceSample};
use crate::streams::{TaskData, TaskStream, TestSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: usize,
    pub task: String,
    pub labels: Vec<u8>,
    pub segments: Vec<Segment>,
}

impl SampleRecord {
    pub fn from_sample(sample: &SequenceSample, task: impl Into<String>) -> Self {
        Self {
            id: sample.id,
            task: task.into(),
            labels: sample.frame_labels.clone(),
            segments: sample.segments.clone(),
        }
    }
}

pub fn run_length(labels: &[u8]) -> Vec<(u8, usize)> {
    let mut out: Vec<(u8, usize)> = Vec::new();
    for &v in labels {
        match out.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

pub fn format_record(r: &SampleRecord) -> String {
    let labels = run_length(&r.labels)
        .iter()
        .map(|(v, n)| format!("{v}x{n}"))
        .collect::<Vec<_>>()
        .join(",");
    let segments = if r.segments.is_empty() {
        "-".to_string()
    } else {
        r.segments
            .iter()
            .map(|s| format!("{}-{}:{}", s.start, s.end, s.domain))
            .collect::<Vec<_>>()
            .join(";")
    };
    format!("id={} task={} labels={} segments={}", r.id, r.task, labels, segments)
}

/// All training and test sequences of a highlight stream, one line each.
/// Rotation streams yield no records.
pub fn stream_records(stream: &TaskStream) -> String {
    let mut out = String::new();
    for task in &stream.tasks {
        if let TaskData::Sequences(seqs) = &task.data {
            for s in seqs {
                out.push_str(&format_record(&SampleRecord::from_sample(s, task.index.to_string())));
                out.push('\n');
            }
        }
    }
    if let TestSet::Sequences(seqs) = &stream.test {
        for s in seqs {
            out.push_str(&format_record(&SampleRecord::from_sample(s, "test")));
            out.push('\n');
        }
    }
    out
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::ConfigParse {
        line,
        message: message.into(),
    }
}

fn number<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(line, format!("invalid {what} `{s}`")))
}

pub fn parse_record(text: &str, line: usize) -> Result<SampleRecord> {
    let mut id = None;
    let mut task = None;
    let mut labels = None;
    let mut segments = None;
    for field in text.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(line, format!("field `{field}` has no `=`")))?;
        match key {
            "id" => id = Some(number(value, line, "id")?),
            "task" => task = Some(value.to_string()),
            "labels" => {
                let mut out = Vec::new();
                for run in value.split(',').filter(|r| !r.is_empty()) {
                    let (v, n) = run
                        .split_once('x')
                        .ok_or_else(|| bad(line, format!("label run `{run}` is not `value x count`")))?;
                    let v: u8 = number(v, line, "label")?;
                    let n: usize = number(n, line, "run length")?;
                    out.extend(std::iter::repeat_n(v, n));
                }
                labels = Some(out);
            }
            "segments" => {
                let mut out = Vec::new();
                for seg in value.split(';').filter(|s| !s.is_empty() && *s != "-") {
                    let (range, domain) = seg
                        .split_once(':')
                        .ok_or_else(|| bad(line, format!("segment `{seg}` lacks a domain")))?;
                    let (start, end) = range
                        .split_once('-')
                        .ok_or_else(|| bad(line, format!("segment `{seg}` lacks a range")))?;
                    let s = Segment {
                        start: number(start, line, "segment start")?,
                        end: number(end, line, "segment end")?,
                        domain: number(domain, line, "domain")?,
                    };
                    if s.end <= s.start {
                        return Err(bad(line, format!("segment `{seg}` is empty")));
                    }
                    out.push(s);
                }
                segments = Some(out);
            }
            other => return Err(bad(line, format!("unknown field `{other}`"))),
        }
    }
    let missing = |name: &str| bad(line, format!("missing field `{name}`"));
    let r = SampleRecord {
        id: id.ok_or_else(|| missing("id"))?,
        task: task.ok_or_else(|| missing("task"))?,
        labels: labels.ok_or_else(|| missing("labels"))?,
        segments: segments.ok_or_else(|| missing("segments"))?,
    };
    if let Some(s) = r.segments.iter().find(|s| s.end > r.labels.len()) {
        return Err(bad(line, format!("segment ending at {} exceeds {} frames", s.end, r.labels.len())));
    }
    Ok(r)
}

/// Parses every non-empty, non-`#` line.
pub fn parse_records(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::streams::{build_highlight_stream, HighlightStreamConfig};

    #[test]
    fn formats_known_record() {
        let r = SampleRecord {
            id: 17,
            task: "2".into(),
            labels: [vec![0; 4], vec![1; 6], vec![0; 10]].concat(),
            segments: vec![Segment {
                start: 4,
                end: 10,
                domain: 2,
            }],
        };
        assert_eq!(format_record(&r), "id=17 task=2 labels=0x4,1x6,0x10 segments=4-10:2");
        assert_eq!(parse_record(&format_record(&r), 1).unwrap(), r);
    }

    #[test]
    fn stream_round_trips() {
        let s = build_highlight_stream(&HighlightStreamConfig::default(), &SeedTree::new(1)).unwrap();
        let text = stream_records(&s);
        let parsed = parse_records(&text).unwrap();
        let again: String = parsed.iter().map(|r| format_record(r) + "\n").collect();
        assert_eq!(again, text);
        let TestSet::Sequences(test) = &s.test else { panic!() };
        let expected = s.tasks.iter().map(|t| t.sample_ids().len()).sum::<usize>() + test.len();
        assert_eq!(parsed.len(), expected);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "id=1 task=1 labels=0x2 segments=-\n\nid=2 task=1 labels=0x2 segments=0-3:1\n";
        match parse_records(text) {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_record("id=1 task=1 labels=2 segments=-", 1).is_err());
        assert!(parse_record("id=1 labels=0x1 segments=-", 1).is_err());
    }
}
