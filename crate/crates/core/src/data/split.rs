use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Half-open calendar-year range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn new(start: i32, end: i32) -> Self {
        YearRange { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        (self.start..self.end).contains(&date.year())
    }

    pub fn overlaps(&self, other: &YearRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Train,
    Validation,
    Test,
}

/// Temporal ranges plus a disjoint spatial assignment of basins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_years: YearRange,
    pub val_years: YearRange,
    pub test_years: YearRange,
    pub train_basins: Vec<String>,
    pub test_basins: Vec<String>,
}

impl SplitSpec {
    pub const DEFAULT_TRAIN_YEARS: YearRange = YearRange { start: 1980, end: 2000 };
    pub const DEFAULT_VAL_YEARS: YearRange = YearRange { start: 2000, end: 2005 };
    pub const DEFAULT_TEST_YEARS: YearRange = YearRange { start: 2005, end: 2015 };

    /// Shuffles `basins` with `seed` and assigns the first `n_train` to
    /// training. Ids are sorted before shuffling so input order is irrelevant.
    pub fn seeded(
        basins: &[String],
        n_train: usize,
        seed: u64,
        train_years: YearRange,
        val_years: YearRange,
        test_years: YearRange,
    ) -> Result<Self> {
        if n_train > basins.len() {
            return Err(Error::arg(format!(
                "{n_train} training basins requested from {}",
                basins.len()
            )));
        }
        let mut ids = basins.to_vec();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train_basins = ids[..n_train].to_vec();
        let mut test_basins = ids[n_train..].to_vec();
        train_basins.sort();
        test_basins.sort();
        Ok(SplitSpec {
            train_years,
            val_years,
            test_years,
            train_basins,
            test_basins,
        })
    }

    /// The 400/131-style default: default year ranges and a seeded basin split.
    pub fn default_for(basins: &[String], n_train: usize, seed: u64) -> Result<Self> {
        Self::seeded(
            basins,
            n_train,
            seed,
            Self::DEFAULT_TRAIN_YEARS,
            Self::DEFAULT_VAL_YEARS,
            Self::DEFAULT_TEST_YEARS,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("train", self.train_years),
            ("val", self.val_years),
            ("test", self.test_years),
        ];
        for i in 0..3 {
            for j in i + 1..3 {
                if ranges[i].1.overlaps(&ranges[j].1) {
                    return Err(Error::arg(format!("{} and {} years overlap", ranges[i].0, ranges[j].0)));
                }
            }
        }
        let train: BTreeSet<&String> = self.train_basins.iter().collect();
        if let Some(b) = self.test_basins.iter().find(|b| train.contains(b)) {
            return Err(Error::arg(format!("basin {b} is in both train and test sets")));
        }
        Ok(())
    }

    pub fn period_years(&self, period: Period) -> YearRange {
        match period {
            Period::Train => self.train_years,
            Period::Validation => self.val_years,
            Period::Test => self.test_years,
        }
    }
}

/// A temporal slice of a dataset, tagged with the period it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub period: Period,
    pub years: YearRange,
    pub data: Dataset,
}

impl Partition {
    /// True when every date in the partition lies inside its tagged years.
    pub fn dates_within_period(&self) -> bool {
        self.data
            .records
            .iter()
            .all(|r| r.dates.iter().all(|&d| self.years.contains(d)))
    }
}

/// Result of [`split`].
#[derive(Clone, Debug)]
pub struct Partitions {
    /// Training basins, training years.
    pub train: Partition,
    /// All basins, validation years.
    pub val: Partition,
    /// All basins, test years.
    pub test: Partition,
    pub train_basins: Vec<String>,
    pub test_basins: Vec<String>,
}

impl Partitions {
    pub fn is_test_basin(&self, id: &str) -> bool {
        self.test_basins.iter().any(|b| b == id)
    }
}

/// Temporal split by year range within every basin plus a spatial split of
/// whole basins.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Partitions> {
    spec.validate()?;
    let present: BTreeSet<String> = dataset.basin_ids().into_iter().collect();
    let missing: Vec<&String> = spec
        .train_basins
        .iter()
        .chain(&spec.test_basins)
        .filter(|b| !present.contains(*b))
        .collect();
    if !missing.is_empty() {
        return Err(Error::arg(format!("basins not in dataset: {missing:?}")));
    }
    let assigned: BTreeSet<&String> = spec.train_basins.iter().chain(&spec.test_basins).collect();
    let unassigned: Vec<&String> = present.iter().filter(|b| !assigned.contains(b)).collect();
    if !unassigned.is_empty() {
        return Err(Error::arg(format!("basins missing from split: {unassigned:?}")));
    }

    let train_set: BTreeSet<&String> = spec.train_basins.iter().collect();
    let slice = |period: Period, only_train: bool| {
        let years = spec.period_years(period);
        let records = dataset
            .records
            .iter()
            .filter(|r| !only_train || train_set.contains(&r.basin_id))
            .map(|r| r.slice_years(&years))
            .filter(|r| !r.is_empty())
            .collect();
        Partition {
            period,
            years,
            data: dataset.with_records(records),
        }
    };
    Ok(Partitions {
        train: slice(Period::Train, true),
        val: slice(Period::Validation, false),
        test: slice(Period::Test, false),
        train_basins: spec.train_basins.clone(),
        test_basins: spec.test_basins.clone(),
    })
}
