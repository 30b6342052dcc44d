mod common;

use approx::assert_relative_eq;
use dpe::trajectory::*;
use dpe::Error;
use proptest::prelude::*;

use common::{dataset, traj_1d};

#[test]
fn discounted_return_hand_values() {
    assert_eq!(discounted_return(&traj_1d(&[0.0, 0.0, 0.0]), 0.9).unwrap(), 0.0);
    assert_eq!(discounted_return(&traj_1d(&[1.0, 2.0, 3.0]), 1.0).unwrap(), 6.0);
    assert_eq!(discounted_return(&traj_1d(&[1.0, 2.0, 3.0]), 0.5).unwrap(), 1.0 + 0.5 * 2.0 + 0.25 * 3.0);
}

#[test]
fn return_to_go_hand_values_and_range() {
    let t = traj_1d(&[1.0, 2.0, 3.0]);
    assert_eq!(return_to_go(&t, 0).unwrap(), 6.0);
    assert_eq!(return_to_go(&t, 1).unwrap(), 5.0);
    assert_eq!(return_to_go(&t, 2).unwrap(), 3.0);
    assert!(matches!(return_to_go(&t, 3), Err(Error::Index { index: 3, len: 3 })));
}

#[test]
fn conditioning_recursion_hand_values() {
    let t = traj_1d(&[1.0, 2.0, 3.0]);
    assert_eq!(rtg_conditioning_sequence(&t, 6.0).unwrap(), vec![6.0, 5.0, 3.0]);
    assert_eq!(rtg_conditioning_sequence(&traj_1d(&[0.0; 4]), 2.5).unwrap(), vec![2.5; 4]);
    assert!(rtg_conditioning_sequence(&t, f64::NAN).unwrap_err().is_validation());
}

#[test]
fn non_finite_reward_is_rejected() {
    let err = Trajectory::new(vec![vec![0.0]], vec![vec![0.0]], vec![f64::INFINITY]).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn malformed_record_names_its_line() {
    let text = "{\"state_dim\":1,\"action_dim\":1,\"horizon\":1,\"discount\":1.0}\n\
                {\"states\":[[0.0]],\"actions\":[[0.0]],\"rewards\":[1.0]}\n\
                {\"states\":[[0.0]], oops\n";
    match read_dataset(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn over_long_trajectory_violates_the_horizon() {
    let err = TrajectoryDataset::new(vec![traj_1d(&[1.0, 1.0, 1.0])], 1.0, 1, None).unwrap_err();
    assert!(matches!(err, Error::Schema(_)));
}

#[test]
fn file_round_trip_preserves_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let ds = TrajectoryDataset::new(
        vec![traj_1d(&[0.1, 1.0 / 3.0]), traj_1d(&[std::f64::consts::PI])],
        0.97,
        4,
        Some("unit test".into()),
    )
    .unwrap();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.behavior_descriptor(), Some("unit test"));
    assert!(matches!(load_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn rtg_satisfies_the_tail_recursion(ds in dataset()) {
        for traj in ds.trajectories() {
            let h = traj.len() - 1;
            prop_assert_eq!(return_to_go(traj, h).unwrap(), traj.rewards()[h]);
            for t in 0..h {
                let lhs = return_to_go(traj, t).unwrap();
                let rhs = traj.rewards()[t] + return_to_go(traj, t + 1).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn undiscounted_return_is_rtg_at_zero(ds in dataset()) {
        for traj in ds.trajectories() {
            prop_assert_eq!(discounted_return(traj, 1.0).unwrap(), return_to_go(traj, 0).unwrap());
        }
    }

    #[test]
    fn conditioning_from_the_full_return_ends_at_the_last_reward(ds in dataset()) {
        for traj in ds.trajectories() {
            let g = rtg_conditioning_sequence(traj, return_to_go(traj, 0).unwrap()).unwrap();
            let last = *traj.rewards().last().unwrap();
            assert_relative_eq!(*g.last().unwrap(), last, epsilon = 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip_is_identity(ds in dataset()) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
