mod common;

use sampfa::cases::ieee39;
use sampfa::grid::{load_case, save_case};
use sampfa::pf::{max_kcl_residual, mismatch, solve, Init, SolveOptions};

/// Flat-start solution of the 39-bus system from an independent Newton
/// solver (pandapower 3.5, tolerance 1e-10 MVA, no reactive limits).
const VM: [f64; 39] = [
    1.0393836419, 1.0484941127, 1.0307077067, 1.0044599672, 1.0060062574, 1.0082255779,
    0.9983972835, 0.9978723158, 1.0383319651, 1.0178431305, 1.0133857803, 1.0008150321,
    1.0149229628, 1.0123189615, 1.0161853647, 1.0325202588, 1.0342365064, 1.0315726008,
    1.0501067582, 0.9910105435, 1.0323191818, 1.0501427366, 1.0451450752, 1.0380010098,
    1.057682748, 1.0525612926, 1.0383449119, 1.0503736565, 1.050114902, 1.0499, 0.982, 0.9841,
    0.9972, 1.0123, 1.0494, 1.0636, 1.0275, 1.0265, 1.03,
];
const VA_DEG: [f64; 39] = [
    -13.5366017963, -9.7852666063, -12.276383649, -12.626734473, -11.1923388345, -10.4083301339,
    -12.7556255111, -13.3358435857, -14.1784415705, -8.1708750353, -8.9369663427, -8.9988236467,
    -8.9299271948, -10.7152948181, -11.3453994952, -10.033348304, -11.1164359817, -11.9861679117,
    -5.4100728818, -6.8211782653, -7.6287460663, -3.1831198589, -3.3812762724, -9.9137585378,
    -8.3692353983, -9.4387695767, -11.3621519039, -5.9283592092, -3.169874112, -7.3704746015, 0.0,
    -0.1884373973, -0.1931744548, -1.6311190192, 1.7765068754, 4.4684374494, -1.5828987508,
    3.8928177439, -14.5352561853,
];
/// Slack generator output in MW and Mvar from the same solver. The slack
/// bus also serves a 9.2 MW, 4.6 Mvar load.
const SLACK_GEN_MW: f64 = 677.871126;
const SLACK_GEN_MVAR: f64 = 221.574486;
const SLACK_LOAD: (f64, f64) = (9.2, 4.6);

/// The same solver with generator reactive limits enforced.
const VM_QLIM: [f64; 39] = [
    1.0394301050, 1.0486142274, 1.0307877406, 1.0045025153, 1.0060333317, 1.0082501419,
    0.9984216672, 0.9978964475, 1.0383419148, 1.0178657048, 1.0134091770, 1.0008403438,
    1.0149489107, 1.0123529707, 1.0162218354, 1.0325570290, 1.0342958634, 1.0316401047,
    1.0501202806, 0.9910179225, 1.0323450635, 1.0501565954, 1.0451594197, 1.0380345249,
    1.0578959490, 1.0526674236, 1.0384307562, 1.0504285789, 1.0501525806, 1.0499000000,
    0.9820000000, 0.9841000000, 0.9972000000, 1.0123000000, 1.0494000000, 1.0636000000,
    1.0280254284, 1.0265000000, 1.0300000000,
];
const VA_DEG_QLIM: [f64; 39] = [
    -13.5354369253, -9.7847945492, -12.2757640657, -12.6261349252, -11.1918233213, -10.4078595719,
    -12.7550030754, -13.3351736834, -14.1774622565, -8.1705257498, -8.9365780372, -8.9984462575,
    -8.9295671972, -10.7148915011, -11.3451461484, -10.0332710001, -11.1164336621, -11.9858815221,
    -5.4101122753, -6.8211721897, -7.6287763255, -3.1832820400, -3.3814339920, -9.9136804933,
    -8.3728655478, -9.4404094608, -11.3628243086, -5.9303108514, -3.1719907988, -7.3702793134,
    0.0000000000, -0.1882663015, -0.1932447036, -1.6311302847, 1.7762790789, 4.4681860083,
    -1.5918339479, 3.8905527267, -14.5340977668,
];

#[test]
fn flat_start_matches_reference_solution() {
    let net = ieee39();
    let opts = SolveOptions {
        enforce_q_limits: false,
        ..Default::default()
    };
    let (sol, rep) = solve(&net, &Init::Flat, &opts).unwrap();
    assert!(rep.converged);
    assert!(rep.iterations <= 10, "{} iterations", rep.iterations);
    assert!(rep.max_mismatch < 1e-8);
    for i in 0..39 {
        assert!((sol.v[i] - VM[i]).abs() < 1e-8, "bus {i}: V {} vs {}", sol.v[i], VM[i]);
        let deg = sol.theta[i].to_degrees();
        assert!((deg - VA_DEG[i]).abs() < 1e-7, "bus {i}: angle {deg} vs {}", VA_DEG[i]);
    }
    assert!((sol.p[30] * net.base_mva - (SLACK_GEN_MW - SLACK_LOAD.0)).abs() < 1e-4);
    assert!((sol.q[30] * net.base_mva - (SLACK_GEN_MVAR - SLACK_LOAD.1)).abs() < 1e-4);
}

#[test]
fn reactive_limits_match_reference_solution() {
    let (sol, rep) = solve(&ieee39(), &Init::Flat, &SolveOptions::default()).unwrap();
    assert!(rep.converged);
    assert!(rep.pv_to_pq_switches > 0);
    for i in 0..39 {
        assert!((sol.v[i] - VM_QLIM[i]).abs() < 1e-8, "bus {i}");
        assert!((sol.theta[i].to_degrees() - VA_DEG_QLIM[i]).abs() < 1e-7, "bus {i}");
    }
}

#[test]
fn solution_satisfies_power_balance_at_every_bus() {
    let (net, sol) = common::solved39();
    assert!(mismatch(&net, &sol.v, &sol.theta).max_abs() < 1e-8);
    assert!(max_kcl_residual(&net, &sol) < 1e-8);
    assert_eq!(sol.theta[30], net.ref_angle);
}

#[test]
fn case_file_roundtrip_is_identity() {
    let net = ieee39();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("case39.json");
    save_case(&net, &p).unwrap();
    assert_eq!(load_case(&p).unwrap(), net);
}

#[test]
fn exact_warm_start_needs_no_updates() {
    let (net, sol) = common::solved39();
    let init = Init::Warm {
        v: sol.v.clone(),
        theta: sol.theta.clone(),
    };
    let (_, rep) = solve(&net, &init, &SolveOptions::default()).unwrap();
    assert!(rep.converged);
    assert_eq!(rep.iterations, 0);
}
