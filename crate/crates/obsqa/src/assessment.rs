//! Confidence-level computation, pre-assessment selection between the
//! spatial and spatiotemporal tests, fusion into a final verdict, and
//! traceback.
//!
//! Every test reduces to a one-sided left p-value p1 = P(X <= x) under its
//! predictive distribution; the confidence level is the two-sided measure
//! CL = 1 - 2|p1 - 0.5|.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{DomainVerdict, GridProductKind, Observation};
use crate::solvers::{normal_cdf, std_normal_cdf, std_normal_quantile};
use crate::tests_point::PredictiveDistribution;
use crate::transform::TransformError;

/// Clamp applied to p-values before the probit in the fusion, keeping z finite.
const P_CLAMP: f64 = 1e-10;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum TestId {
    Domain,
    Spatial,
    SpatioTemporal,
    Trend,
    Gridded(GridProductKind),
    Subdaily,
}

impl TestId {
    pub fn name(&self) -> String {
        match self {
            TestId::Domain => "domain".to_string(),
            TestId::Spatial => "spatial".to_string(),
            TestId::SpatioTemporal => "spatiotemporal".to_string(),
            TestId::Trend => "trend".to_string(),
            TestId::Gridded(p) => format!("gridded_{}", p.name()),
            TestId::Subdaily => "subdaily".to_string(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AssessError {
    #[error("p-value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// CL = 1 - 2|p1 - 0.5|. Maximal (1.0) at the predictive median, zero at
/// either tail.
pub fn confidence_level(p1: f64) -> Result<f64, AssessError> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(AssessError::OutOfRange(p1));
    }
    Ok(1.0 - 2.0 * (p1 - 0.5).abs())
}

/// One-sided left p-value of an observation under a test's predictive
/// distribution. A point mass at the variable's lower bound (rain dry days)
/// is handled with the mid-p convention.
pub fn p1_from_predictive(
    obs_value: f64,
    dist: &PredictiveDistribution,
) -> Result<f64, AssessError> {
    match dist.zero_mass {
        None => {
            let z = dist.transform.forward(obs_value)?;
            Ok(normal_cdf(z, dist.mean, dist.sigma))
        }
        Some(m) => {
            if obs_value <= dist.lower_bound.unwrap_or(0.0) {
                Ok(m / 2.0)
            } else {
                let z = dist.transform.forward(obs_value)?;
                Ok(m + (1.0 - m) * normal_cdf(z, dist.mean, dist.sigma))
            }
        }
    }
}

/// One applicable test's outcome for a single observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_id: TestId,
    /// one-sided left p-value
    pub p1: f64,
    /// confidence level from Eq.-style two-sided folding of p1
    pub cl: f64,
    /// predictive median in canonical units
    pub predicted_median: f64,
    /// predictive spread in transformed units
    pub predicted_sigma: f64,
    /// calibration mean squared out-of-fold error, the fusion weight basis
    pub cal_mse: f64,
    /// diagnostics: the inputs the test actually used
    pub inputs_used: BTreeMap<String, f64>,
}

impl TestResult {
    pub fn from_p1(
        test_id: TestId,
        p1: f64,
        predicted_median: f64,
        predicted_sigma: f64,
        cal_mse: f64,
        inputs_used: BTreeMap<String, f64>,
    ) -> Result<TestResult, AssessError> {
        Ok(TestResult {
            test_id,
            p1,
            cl: confidence_level(p1)?,
            predicted_median,
            predicted_sigma,
            cal_mse,
            inputs_used,
        })
    }
}

/// A test that could not run, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub test_id: TestId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub observation: Observation,
    /// None means NA: no test was applicable.
    pub final_cl: Option<f64>,
    /// (test, normalized weight, cl) for every fused test
    pub contributing: Vec<(TestId, f64, f64)>,
    pub excluded: Vec<Exclusion>,
    pub domain_verdict: DomainVerdict,
}

impl Assessment {
    pub fn is_na(&self) -> bool {
        self.final_cl.is_none()
    }
}

/// Pre-assessment: when both the spatial and spatiotemporal tests apply,
/// keep only the one that would carry the greater normalized inverse-MSE
/// weight alongside the other applicable tests. Ties go to the
/// spatiotemporal test, which draws on the richer information set.
pub fn pre_assess(spatial_mse: Option<f64>, st_mse: Option<f64>, _others: &[f64]) -> TestId {
    match (spatial_mse, st_mse) {
        (Some(_), None) => TestId::Spatial,
        (None, _) => TestId::SpatioTemporal,
        (Some(s), Some(t)) => {
            // With identical companions, the normalized weight comparison
            // reduces to comparing the raw inverse MSEs.
            if 1.0 / s > 1.0 / t {
                TestId::Spatial
            } else {
                TestId::SpatioTemporal
            }
        }
    }
}

/// Weighted Stouffer combination of one-sided p-values with inverse
/// calibration-MSE weights. A single test passes through bit-exactly.
pub fn fuse(
    observation: &Observation,
    domain_verdict: DomainVerdict,
    results: &[TestResult],
    excluded: Vec<Exclusion>,
) -> Assessment {
    if let DomainVerdict::Fail { .. } = domain_verdict {
        return Assessment {
            observation: observation.clone(),
            final_cl: Some(0.0),
            contributing: vec![(TestId::Domain, 1.0, 0.0)],
            excluded,
            domain_verdict,
        };
    }
    if results.is_empty() {
        return Assessment {
            observation: observation.clone(),
            final_cl: None,
            contributing: vec![],
            excluded,
            domain_verdict,
        };
    }
    if results.len() == 1 {
        let r = &results[0];
        return Assessment {
            observation: observation.clone(),
            final_cl: Some(r.cl),
            contributing: vec![(r.test_id, 1.0, r.cl)],
            excluded,
            domain_verdict,
        };
    }

    let raw: Vec<f64> = results.iter().map(|r| 1.0 / r.cal_mse.max(1e-300)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let z_num: f64 = results
        .iter()
        .zip(&weights)
        .map(|(r, w)| w * std_normal_quantile(r.p1.clamp(P_CLAMP, 1.0 - P_CLAMP)))
        .sum();
    let z_den: f64 = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let p1_fused = std_normal_cdf(z_num / z_den);
    let final_cl = confidence_level(p1_fused).expect("fused p1 in range");

    Assessment {
        observation: observation.clone(),
        final_cl: Some(final_cl),
        contributing: results
            .iter()
            .zip(weights)
            .map(|(r, w)| (r.test_id, w, r.cl))
            .collect(),
        excluded,
        domain_verdict,
    }
}

/// One line of the traceback report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracebackEntry {
    pub test_id: TestId,
    pub weight: f64,
    pub cl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traceback {
    /// contributing tests, lowest confidence first (ties by test id)
    pub contributing: Vec<TracebackEntry>,
    pub excluded: Vec<Exclusion>,
}

/// Deterministic traceback: contributing tests ascending by confidence level
/// so the likely culprit is listed first, then exclusions with reasons.
pub fn traceback(assessment: &Assessment) -> Traceback {
    let mut contributing: Vec<TracebackEntry> = assessment
        .contributing
        .iter()
        .map(|&(test_id, weight, cl)| TracebackEntry { test_id, weight, cl })
        .collect();
    contributing.sort_by(|a, b| {
        a.cl.partial_cmp(&b.cl)
            .unwrap()
            .then_with(|| a.test_id.cmp(&b.test_id))
    });
    let mut excluded = assessment.excluded.clone();
    excluded.sort_by(|a, b| a.test_id.cmp(&b.test_id));
    Traceback { contributing, excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{BoundKind, VariableKind};
    use crate::transform::TransformSpec;
    use chrono::NaiveDate;

    fn obs() -> Observation {
        Observation {
            station_id: "T1".into(),
            date: NaiveDate::from_ymd_opt(2019, 10, 3).unwrap(),
            variable: VariableKind::Tmax,
            value: 20.0,
            quality_hint: None,
        }
    }

    fn result(test_id: TestId, p1: f64, cal_mse: f64) -> TestResult {
        TestResult::from_p1(test_id, p1, 20.0, 1.0, cal_mse, BTreeMap::new()).unwrap()
    }

    #[test]
    fn confidence_level_anchor_values() {
        assert_eq!(confidence_level(0.5).unwrap(), 1.0);
        assert_eq!(confidence_level(0.0).unwrap(), 0.0);
        assert_eq!(confidence_level(1.0).unwrap(), 0.0);
        assert!((confidence_level(0.8).unwrap() - 0.4).abs() < 1e-15);
        assert!(confidence_level(1.2).is_err());
        assert!(confidence_level(-0.1).is_err());
    }

    #[test]
    fn confidence_level_symmetric() {
        // Dyadic grid: 1 - p is exact in f64 for these p, so symmetry must be
        // bit-exact. For general p the subtraction itself rounds, which can
        // shift the result by one ulp; that is a property of the inputs, not
        // of the formula.
        for i in 0..=16_384u32 {
            let p = f64::from(i) * 2f64.powi(-14);
            assert_eq!(
                confidence_level(p).unwrap().to_bits(),
                confidence_level(1.0 - p).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn p1_gaussian_anchor() {
        let d = PredictiveDistribution {
            mean: 5.0,
            sigma: 2.0,
            transform: TransformSpec::Identity,
            zero_mass: None,
            lower_bound: None,
        };
        assert_eq!(p1_from_predictive(5.0, &d).unwrap(), 0.5);
        let p = p1_from_predictive(5.0 + 1.96 * 2.0, &d).unwrap();
        assert!((p - 0.975).abs() < 1e-4);
    }

    #[test]
    fn p1_zero_mass_mid_p() {
        let d = PredictiveDistribution {
            mean: 1.0,
            sigma: 1.0,
            transform: TransformSpec::Identity,
            zero_mass: Some(0.6),
            lower_bound: Some(0.0),
        };
        assert!((p1_from_predictive(0.0, &d).unwrap() - 0.30).abs() < 1e-15);
        // positive values: m + (1-m) * Phi
        let p = p1_from_predictive(1.0, &d).unwrap();
        assert!((p - (0.6 + 0.4 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn pre_assess_rules() {
        assert_eq!(pre_assess(Some(2.0), Some(1.0), &[]), TestId::SpatioTemporal);
        assert_eq!(pre_assess(Some(1.0), Some(2.0), &[]), TestId::Spatial);
        assert_eq!(pre_assess(Some(1.0), Some(1.0), &[]), TestId::SpatioTemporal);
        assert_eq!(pre_assess(None, Some(9.0), &[]), TestId::SpatioTemporal);
        assert_eq!(pre_assess(Some(9.0), None, &[]), TestId::Spatial);
    }

    #[test]
    fn fuse_single_test_bit_exact() {
        let r = result(TestId::Spatial, 0.3141592653589793, 0.7);
        let a = fuse(&obs(), DomainVerdict::Pass, &[r.clone()], vec![]);
        assert_eq!(a.final_cl, Some(r.cl));
        assert_eq!(a.contributing, vec![(TestId::Spatial, 1.0, r.cl)]);
    }

    #[test]
    fn fuse_two_median_tests() {
        let rs = [
            result(TestId::Spatial, 0.5, 1.0),
            result(TestId::Gridded(GridProductKind::Nwp), 0.5, 1.0),
        ];
        let a = fuse(&obs(), DomainVerdict::Pass, &rs, vec![]);
        assert!((a.final_cl.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_stouffer_anchor() {
        // two equal-weight tests at p1 = 0.9750:
        // z_f = 1.95996... * sqrt(2) = 2.77181, p1_f = 0.9972127, cl = 0.0055746
        let rs = [
            result(TestId::Spatial, 0.9750, 1.0),
            result(TestId::Gridded(GridProductKind::Era), 0.9750, 1.0),
        ];
        let a = fuse(&obs(), DomainVerdict::Pass, &rs, vec![]);
        assert!((a.final_cl.unwrap() - 0.005574596680784411).abs() < 1e-9);
    }

    #[test]
    fn fuse_weight_scaling_invariance() {
        let mk = |scale: f64| {
            [
                result(TestId::Spatial, 0.9, 0.5 * scale),
                result(TestId::Trend, 0.3, 2.0 * scale),
                result(TestId::Subdaily, 0.6, 1.0 * scale),
            ]
        };
        let a = fuse(&obs(), DomainVerdict::Pass, &mk(1.0), vec![]);
        let b = fuse(&obs(), DomainVerdict::Pass, &mk(137.0), vec![]);
        assert!((a.final_cl.unwrap() - b.final_cl.unwrap()).abs() < 1e-12);
        for (x, y) in a.contributing.iter().zip(&b.contributing) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_empty_is_na() {
        let a = fuse(&obs(), DomainVerdict::Pass, &[], vec![]);
        assert!(a.is_na());
        assert!(a.contributing.is_empty());
    }

    #[test]
    fn domain_failure_forces_zero() {
        let verdict = DomainVerdict::Fail { bound: BoundKind::Upper, limit: 60.0 };
        let rs = [result(TestId::Spatial, 0.5, 1.0)];
        let a = fuse(&obs(), verdict, &rs, vec![]);
        assert_eq!(a.final_cl, Some(0.0));
        assert_eq!(a.contributing, vec![(TestId::Domain, 1.0, 0.0)]);
    }

    #[test]
    fn traceback_ordering() {
        let rs = [
            result(TestId::Spatial, 0.5, 1.0),
            result(TestId::Trend, 0.999, 1.0),
            result(TestId::Subdaily, 0.8, 1.0),
        ];
        let a = fuse(&obs(), DomainVerdict::Pass, &rs, vec![]);
        let tb = traceback(&a);
        assert_eq!(tb.contributing[0].test_id, TestId::Trend);
        assert_eq!(tb.contributing[2].test_id, TestId::Spatial);
    }

    #[test]
    fn traceback_ties_by_test_order() {
        let rs = [
            result(TestId::Trend, 0.5, 1.0),
            result(TestId::Spatial, 0.5, 1.0),
        ];
        let a = fuse(&obs(), DomainVerdict::Pass, &rs, vec![]);
        let tb = traceback(&a);
        assert_eq!(tb.contributing[0].test_id, TestId::Spatial);
    }

    #[test]
    fn traceback_na_only_exclusions() {
        let a = fuse(
            &obs(),
            DomainVerdict::Pass,
            &[],
            vec![Exclusion { test_id: TestId::Spatial, reason: "no neighbors".into() }],
        );
        let tb = traceback(&a);
        assert!(tb.contributing.is_empty());
        assert_eq!(tb.excluded.len(), 1);
    }

    proptest::proptest! {
        #[test]
        fn cl_symmetry_property(i in 0u32..=(1 << 20)) {
            // dyadic p keeps 1 - p exact; see confidence_level_symmetric
            let p = f64::from(i) * 2f64.powi(-20);
            proptest::prop_assert_eq!(
                confidence_level(p).unwrap(),
                confidence_level(1.0 - p).unwrap()
            );
        }

        #[test]
        fn fusion_weights_sum_to_one(
            p1 in 0.01f64..0.99,
            p2 in 0.01f64..0.99,
            m1 in 0.1f64..10.0,
            m2 in 0.1f64..10.0,
        ) {
            let rs = [result(TestId::Spatial, p1, m1), result(TestId::Trend, p2, m2)];
            let a = fuse(&obs(), DomainVerdict::Pass, &rs, vec![]);
            let sum: f64 = a.contributing.iter().map(|c| c.1).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
