//! Demonstrations and their JSON-lines storage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertSolution;
use crate::observation::Observation;
use crate::splines::ActionTuple;

/// One observation with the expert's distinct solutions, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub observation: Observation,
    pub actions: Vec<ActionTuple>,
    pub costs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    observation: Vec<f64>,
    actions: Vec<Vec<f64>>,
    costs: Vec<f64>,
}

impl Demonstration {
    pub fn from_solutions(observation: Observation, solutions: &[ExpertSolution]) -> Self {
        Self {
            observation,
            actions: solutions.iter().map(|s| s.action).collect(),
            costs: solutions.iter().map(|s| s.cost).collect(),
        }
    }

    pub fn n_e(&self) -> usize {
        self.actions.len()
    }

    pub fn to_json_line(&self) -> Result<String> {
        let rec = Record {
            observation: self.observation.to_array().to_vec(),
            actions: self.actions.iter().map(|a| a.to_array().to_vec()).collect(),
            costs: self.costs.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: Record = serde_json::from_str(line)?;
        if rec.actions.len() != rec.costs.len() {
            return Err(Error::Shape("actions and costs differ in length".into()));
        }
        Ok(Self {
            observation: Observation::from_slice(&rec.observation)?,
            actions: rec.actions.iter().map(|a| ActionTuple::from_slice(a)).collect::<Result<_>>()?,
            costs: rec.costs,
        })
    }
}

pub fn write_jsonl(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in demos {
        writeln!(w, "{}", d.to_json_line()?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Demonstration>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Demonstration::from_json_line(&line)?);
    }
    Ok(out)
}

/// Shuffles with `seed` and returns `(train, eval)` with `train_fraction`
/// of the records in the first part.
pub fn split(demos: &[Demonstration], train_fraction: f64, seed: u64) -> (Vec<Demonstration>, Vec<Demonstration>) {
    let mut idx: Vec<usize> = (0..demos.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((demos.len() as f64) * train_fraction).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| demos[i].clone()).collect();
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

/// Count of demonstrations per number of expert solutions (`hist[k]` holds
/// the count with `n_e = k`).
pub fn n_e_histogram(demos: &[Demonstration], n_s: usize) -> Vec<usize> {
    let mut hist = vec![0; n_s + 1];
    for d in demos {
        hist[d.n_e().min(n_s)] += 1;
    }
    hist
}
