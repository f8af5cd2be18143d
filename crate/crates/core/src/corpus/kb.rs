use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One step of one task. `global_id` indexes the flat label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDescription {
    pub task_id: usize,
    pub step_index: usize,
    pub global_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: usize,
    pub title: String,
    first_gid: usize,
    len: usize,
}

impl Task {
    pub fn num_steps(&self) -> usize {
        self.len
    }

    pub fn global_ids(&self) -> Range<usize> {
        self.first_gid..self.first_gid + self.len
    }
}

/// Ordered step descriptions grouped by task.
///
/// Global ids follow `(task_id, step_index)` lexicographic order, so the
/// steps of task `t` occupy one contiguous id range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    tasks: Vec<Task>,
    steps: Vec<StepDescription>,
}

/// Counts collected while loading a knowledge base file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KbLoadReport {
    pub records: usize,
    pub rejected_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_id: Option<u64>,
    title: String,
    steps: Vec<String>,
}

impl KnowledgeBase {
    /// Builds a knowledge base from `(title, steps)` pairs in task order.
    pub fn from_tasks<I, S>(tasks: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<String>)>,
        S: Into<String>,
    {
        let mut kb = KnowledgeBase {
            tasks: Vec::new(),
            steps: Vec::new(),
        };
        for (title, steps) in tasks {
            let task_id = kb.tasks.len();
            if steps.is_empty() {
                return Err(Error::invalid(format!("task {task_id} has no steps")));
            }
            let first_gid = kb.steps.len();
            for (step_index, text) in steps.into_iter().enumerate() {
                let text = text.trim().to_string();
                if text.is_empty() {
                    return Err(Error::invalid(format!(
                        "task {task_id} step {step_index} has empty text"
                    )));
                }
                kb.steps.push(StepDescription {
                    task_id,
                    step_index,
                    global_id: first_gid + step_index,
                    text,
                });
            }
            kb.tasks.push(Task {
                task_id,
                title: title.into(),
                first_gid,
                len: kb.steps.len() - first_gid,
            });
        }
        Ok(kb)
    }

    /// Total step count `S`.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Task count `T`.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn steps(&self) -> &[StepDescription] {
        &self.steps
    }

    pub fn step(&self, global_id: usize) -> Option<&StepDescription> {
        self.steps.get(global_id)
    }

    pub fn task(&self, task_id: usize) -> Option<&Task> {
        self.tasks.get(task_id)
    }

    pub fn task_steps(&self, task_id: usize) -> Result<Range<usize>> {
        self.task(task_id)
            .map(Task::global_ids)
            .ok_or(Error::UnknownTask(task_id))
    }

    /// The next step of the same task, if there is one.
    pub fn successor(&self, global_id: usize) -> Option<usize> {
        let step = self.steps.get(global_id)?;
        let task = &self.tasks[step.task_id];
        (step.step_index + 1 < task.len).then_some(global_id + 1)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for task in &self.tasks {
            let record = KbRecord {
                task_id: Some(task.task_id as u64),
                title: task.title.clone(),
                steps: self.steps[task.global_ids()]
                    .iter()
                    .map(|s| s.text.clone())
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses the JSONL interchange format
    /// `{"task_id"?, "title", "steps": [..]}`.
    ///
    /// Records carrying an empty step string are dropped and counted in the
    /// report. Malformed lines and empty step lists are hard errors. When
    /// `task_id` is present on every record, tasks are ordered by it; ids are
    /// then renumbered densely from zero.
    pub fn read_jsonl<R: Read>(reader: R) -> Result<(Self, KbLoadReport)> {
        let mut report = KbLoadReport::default();
        let mut records = Vec::new();
        let mut with_ids = 0usize;
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KbRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            report.records += 1;
            if rec.steps.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "record has an empty steps list".into(),
                });
            }
            if rec.steps.iter().any(|s| s.trim().is_empty()) {
                warn!("kb line {lineno}: empty step text, record rejected");
                report.rejected_records += 1;
                continue;
            }
            with_ids += rec.task_id.is_some() as usize;
            records.push((lineno, rec));
        }
        if with_ids != 0 && with_ids != records.len() {
            return Err(Error::invalid(
                "task_id must be given on every record or on none",
            ));
        }
        if with_ids != 0 {
            records.sort_by_key(|(_, r)| r.task_id);
            if let Some(w) = records.windows(2).find(|w| w[0].1.task_id == w[1].1.task_id) {
                return Err(Error::Parse {
                    line: w[1].0,
                    message: format!("duplicate task_id {}", w[1].1.task_id.unwrap()),
                });
            }
        }
        let kb = Self::from_tasks(records.into_iter().map(|(_, r)| (r.title, r.steps)))?;
        Ok((kb, report))
    }
}

/// Loads a knowledge base from a JSONL file.
pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<(KnowledgeBase, KbLoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    KnowledgeBase::read_jsonl(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<(KnowledgeBase, KbLoadReport)> {
        KnowledgeBase::read_jsonl(s.as_bytes())
    }

    #[test]
    fn two_tasks_count_and_ids() {
        let (kb, report) = parse(
            r#"{"title":"make tea","steps":["boil water","add leaves","pour"]}
{"title":"fold shirt","steps":["lay flat","fold sleeves"]}"#,
        )
        .unwrap();
        assert_eq!(report.records, 2);
        assert_eq!(kb.num_steps(), 5);
        assert_eq!(kb.num_tasks(), 2);
        let ids: Vec<_> = kb.steps().iter().map(|s| s.global_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(kb.step(3).unwrap().task_id, 1);
        assert_eq!(kb.step(3).unwrap().step_index, 0);
        assert_eq!(kb.successor(1), Some(2));
        assert_eq!(kb.successor(2), None);
        assert_eq!(kb.successor(4), None);
        assert_eq!(kb.task_steps(1).unwrap(), 3..5);
    }

    #[test]
    fn empty_steps_list_is_hard_error_with_line() {
        let err = parse("{\"title\":\"a\",\"steps\":[\"x\"]}\n{\"title\":\"b\",\"steps\":[]}")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_record_names_line() {
        let err = parse("{\"title\":\"a\",\"steps\":[\"x\"]}\n\n{oops").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn empty_step_text_rejects_record_and_counts() {
        let (kb, report) = parse(
            "{\"title\":\"a\",\"steps\":[\"x\",\"  \"]}\n{\"title\":\"b\",\"steps\":[\"y\"]}",
        )
        .unwrap();
        assert_eq!(report.rejected_records, 1);
        assert_eq!(kb.num_tasks(), 1);
        assert_eq!(kb.step(0).unwrap().text, "y");
    }

    #[test]
    fn explicit_task_ids_order_tasks_and_duplicate_titles_are_fine() {
        let (kb, _) = parse(
            "{\"task_id\":7,\"title\":\"same\",\"steps\":[\"late\"]}\n{\"task_id\":2,\"title\":\"same\",\"steps\":[\"early\"]}",
        )
        .unwrap();
        assert_eq!(kb.step(0).unwrap().text, "early");
        assert_eq!(kb.tasks()[1].title, "same");
        let err = parse(
            "{\"task_id\":1,\"title\":\"a\",\"steps\":[\"x\"]}\n{\"task_id\":1,\"title\":\"b\",\"steps\":[\"y\"]}",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn jsonl_round_trip_preserves_ids_and_text() {
        let kb = KnowledgeBase::from_tasks(vec![
            ("t0", vec!["a b".to_string(), "c".into()]),
            ("t1", vec!["d".to_string()]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        kb.write_jsonl(&mut buf).unwrap();
        let (back, _) = KnowledgeBase::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, kb);
    }

    #[test]
    fn paper_scale_counts() {
        // 1,059 tasks holding 10,588 steps: 1,057 tasks of 10 and 2 of 9.
        let tasks = (0..1059).map(|t| {
            let n = if t < 1057 { 10 } else { 9 };
            (
                format!("task {t}"),
                (0..n).map(|s| format!("task {t} step {s}")).collect(),
            )
        });
        let kb = KnowledgeBase::from_tasks(tasks).unwrap();
        assert_eq!(kb.num_steps(), 10_588);
        assert_eq!(kb.num_tasks(), 1_059);
        assert_eq!(kb.steps().last().unwrap().global_id, 10_587);
    }
}
