//! The bundled demo scene and session.

pub const SCENE: &str = include_str!("../../assets/demo_scene.toml");
pub const SESSION: &str = include_str!("../../assets/demo_session.toml");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Scene, SessionSpec};

    #[test]
    fn demo_specs_parse() {
        let scene = Scene::parse(SCENE).unwrap();
        assert_eq!(scene.logos.len(), 3);
        let session = SessionSpec::parse(SESSION).unwrap();
        assert_eq!(session.scan.as_ref().unwrap().frame_times().len(), 200);
        assert_eq!(session.eye_tracker.frame_times().len(), 600);
    }
}
