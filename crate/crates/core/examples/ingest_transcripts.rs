//! Parse SRT and WebVTT transcripts into narrated segments, build a small
//! knowledge base, and cut fixed-span clip windows around each cue.

use stepweld::corpus::{parse_transcript, window_segments, KnowledgeBase, TranscriptFormat, WindowPolicy};

const SRT: &str = "1
00:00:01,000 --> 00:00:04,500
first crack the eggs into a bowl

2
00:00:05,000 --> 00:00:16,000
whisk them until the yolks and whites combine

3
00:00:17,000 --> 00:00:18,000
um
";

const VTT: &str = "WEBVTT

00:00.500 --> 00:03.000
pour the batter into a hot pan

00:03.500 --> 00:09.000
flip it once bubbles form
";

fn main() -> stepweld::Result<()> {
    let kb = KnowledgeBase::from_tasks([
        ("make an omelette", vec!["crack eggs".to_string(), "whisk eggs".into(), "fry".into()]),
        ("make pancakes", vec!["mix batter".to_string(), "pour batter".into(), "flip pancake".into()]),
    ])?;
    println!("kb: {} tasks, {} steps", kb.num_tasks(), kb.num_steps());
    for s in kb.steps() {
        println!("  gid {:>2}  task {} step {}  {}", s.global_id, s.task_id, s.step_index, s.text);
    }

    for (id, text, format) in [("omelette", SRT, TranscriptFormat::Srt), ("pancakes", VTT, TranscriptFormat::WebVtt)] {
        let (video, _) = parse_transcript(id, text.as_bytes(), format)?;
        println!("\n{id}: {} segments, ends at {} ms", video.len(), video.end_ms());
        for w in window_segments(&video, 8.0, WindowPolicy::Center)? {
            println!(
                "  {:<12} cue {:>6}-{:<6} window {:>6}-{:<6} {:?}",
                w.segment.key(),
                w.segment.start_ms,
                w.segment.end_ms,
                w.start_ms,
                w.end_ms,
                w.segment.text
            );
        }
    }
    Ok(())
}
