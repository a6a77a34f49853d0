use std::path::Path;

use mfctl::config::{parse_problem, read_problem, TerminalTarget};
use mfctl_core::samples::{principal_agent, square_regulator, two_agent_plane};
use mfctl_core::model::GameSpec;
use nalgebra::DVector;

fn fixture(name: &str) -> mfctl::config::Problem {
    read_problem(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)).unwrap()
}

fn close(a: &GameSpec, b: &GameSpec) -> bool {
    let pw = |x: &mfctl_core::model::Piecewise, y: &mfctl_core::model::Piecewise| {
        x.starts == y.starts && x.values.iter().zip(&y.values).all(|(p, q)| (p - q).amax() < 1e-12)
    };
    let (d, e) = (&a.dynamics, &b.dynamics);
    a.n == b.n
        && a.m0 == b.m0
        && a.agent_dims == b.agent_dims
        && a.horizon == b.horizon
        && [(&d.a, &e.a), (&d.a_bar, &e.a_bar), (&d.b, &e.b), (&d.b_bar, &e.b_bar), (&d.c, &e.c), (&d.c_bar, &e.c_bar), (&d.d, &e.d), (&d.d_bar, &e.d_bar)]
            .iter()
            .all(|(x, y)| pw(x, y))
        && a.agents.iter().zip(&b.agents).all(|(p, q)| {
            (&p.h - &q.h).amax() < 1e-12
                && (&p.h_bar - &q.h_bar).amax() < 1e-12
                && pw(&p.q, &q.q)
                && pw(&p.q_bar, &q.q_bar)
                && pw(&p.r, &q.r)
                && pw(&p.r_bar, &q.r_bar)
        })
}

#[test]
fn example_file_matches_builtin() {
    let p = fixture("two_agent.toml");
    assert_eq!(p.spec, two_agent_plane());
    let t = p.target.unwrap();
    assert_eq!(t.x0, DVector::from_row_slice(&[1.0, -0.5]));
    assert_eq!(t.x_t.at(2.0), DVector::from_row_slice(&[2.0, -1.0]));
}

#[test]
fn square_regulator_file_matches_builtin() {
    assert_eq!(fixture("b_zero.toml").spec, square_regulator());
}

#[test]
fn principal_agent_file_matches_builtin() {
    assert!(close(&fixture("principal_agent.toml").spec, &principal_agent()));
}

#[test]
fn piecewise_coefficient_with_fraction() {
    let p = fixture("time_varying.toml");
    let a = &p.spec.dynamics.a;
    assert_eq!(a.starts, vec![0.0, 0.5]);
    assert_eq!(a.values[1][(0, 1)], 0.5);
}

const SMALL: &str = r#"
horizon = 1.0
[dimensions]
n = 1
m0 = 1
agents = [1]
[dynamics]
A = [[0]]
B = [[1, 1]]
C = [[0]]
D = [[1, 0]]
[agent.1]
H = [[1]]
Q = [[0]]
R = [[1]]
"#;

#[test]
fn minimal_file_defaults_barred_terms_to_zero() {
    let p = parse_problem(SMALL).unwrap();
    assert!(p.target.is_none());
    assert_eq!(p.spec.dynamics.b_bar.values[0].amax(), 0.0);
    assert_eq!(p.spec.agents[0].h_bar.amax(), 0.0);
    assert!(!p.spec.h3_asserted);
}

#[test]
fn shape_error_points_at_the_entry() {
    let src = SMALL.replace("B = [[1, 1]]", "B = [[1, 1, 1]]");
    let e = parse_problem(&src).unwrap_err();
    assert_eq!(e.line, Some(9), "{e}");
    assert!(e.to_string().starts_with("line 9"), "{e}");
}

#[test]
fn syntax_error_has_position() {
    let e = parse_problem("horizon = = 1").unwrap_err();
    assert_eq!(e.line, Some(1));
    assert!(e.column.is_some());
}

#[test]
fn agent_sections_must_match_dimensions() {
    let src = SMALL.replace("[agent.1]", "[agent.2]");
    assert!(parse_problem(&src).is_err());
    let src = SMALL.replace("agents = [1]", "agents = [1, 1]");
    assert!(parse_problem(&src).is_err());
}

#[test]
fn bad_fraction_is_rejected() {
    let src = SMALL.replace("A = [[0]]", "A = [[\"1/0\"]]");
    assert!(parse_problem(&src).is_err());
    let src = SMALL.replace("A = [[0]]", "A = [[\"one\"]]");
    assert!(parse_problem(&src).is_err());
}

#[test]
fn terminal_weight_cannot_be_piecewise() {
    let src = SMALL.replace("H = [[1]]", "H = [{ from = 0.0, value = [[1]] }, { from = 0.5, value = [[2]] }]");
    assert!(parse_problem(&src).is_err());
}

#[test]
fn target_kinds() {
    let c = TerminalTarget::Constant { value: vec![1.0, 2.0] };
    assert_eq!(c.at(5.0), DVector::from_row_slice(&[1.0, 2.0]));
    let l = TerminalTarget::Linear { offset: vec![1.0], slope: vec![2.0] };
    assert_eq!(l.at(0.5), DVector::from_element(1, 2.0));
    let src = format!("{SMALL}\n[target]\nx0 = [1.0]\nxT = {{ kind = \"linear\", offset = [0.0], slope = [1.0] }}\n");
    let p = parse_problem(&src).unwrap();
    assert_eq!(p.target.unwrap().x_t, TerminalTarget::Linear { offset: vec![0.0], slope: vec![1.0] });
    let src = format!("{SMALL}\n[target]\nx0 = [1.0, 2.0]\nxT = {{ kind = \"constant\", value = [0.0] }}\n");
    assert!(parse_problem(&src).is_err());
}
