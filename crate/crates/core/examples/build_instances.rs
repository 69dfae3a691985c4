//! Detects emotion flips in a short dialogue and builds one instance per flip.
//!
//! `cargo run -p efr --example build_instances`

use efr::corpus::parse_dialogues_str;
use efr::instances::{build_instances, detect_flips};

const DIALOGUE: &str = r#"{"dialogue_id":"ross","utterances":[{"index":0,"speaker":"Ross","text":"No! No sir umm, she means a lot to me. I mean, I care I-I love Rachel.","emotion":"fear"},{"index":1,"speaker":"Mona","text":"What?!","emotion":"surprise"},{"index":2,"speaker":"Ross","text":"Oh but not that way. I mean I mean I'm not in love with her. I love her like a, like a friend.","emotion":"joy"},{"index":3,"speaker":"Dr. Green","text":"Oh really? That's how you treat a friend? You get her in trouble and then refuse to marry her?","emotion":"anger"},{"index":4,"speaker":"Ross","text":"Hey! I offered to marry her!","emotion":"anger"}]}"#;

pub fn run_example() -> efr::Result<usize> {
    let dialogues = parse_dialogues_str(DIALOGUE, "inline")?;
    for flip in detect_flips(&dialogues[0]) {
        println!(
            "flip at utterance {} ({}): {} -> {}",
            flip.target_index, flip.target_speaker, flip.source_emotion, flip.target_emotion
        );
    }
    let instances = build_instances(&dialogues, None)?;
    for inst in &instances {
        println!("{}: {} utterances", inst.instance_id, inst.len());
    }
    Ok(instances.len())
}

fn main() -> efr::Result<()> {
    run_example().map(|_| ())
}
