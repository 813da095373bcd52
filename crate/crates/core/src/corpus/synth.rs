//! Templated two-speaker grammar for desk-scale experiments.
//!
//! Each exchange is a question, an answer that repeats the question's slot
//! value, and a reply from the first speaker. Answers depend on the question
//! and replies on both, so a model with dialogue context can do better than
//! one without.

use std::fmt::Write as _;

use crate::tensor::Rng;

struct Topic {
    values: &'static [&'static str],
    questions: &'static [&'static str],
    answers: &'static [&'static str],
    replies: &'static [&'static str],
}

pub const NAMES: &[&str] = &["John", "Mary", "Peter", "Susan", "Frank", "Laura", "Mike", "Anna"];

// `{}` is the slot value, `{n}` a number.
const TOPICS: &[Topic] = &[
    Topic {
        values: &[
            "pizza", "pasta", "soup", "salad", "rice", "bread", "cheese", "fish", "cake", "tea",
        ],
        questions: &[
            "Do you like {}?",
            "Have you tried the {}?",
            "What do you think of the {}?",
        ],
        answers: &["Yes, I love {}.", "No, I hate {}.", "The {} is fine, I guess."],
        replies: &[
            "Me too, {} is great.",
            "Really? I thought you liked {}.",
            "Okay, no {} then.",
        ],
    },
    Topic {
        values: &[
            "paris",
            "london",
            "rome",
            "the beach",
            "the park",
            "the office",
            "the lake",
            "the city",
        ],
        questions: &[
            "Are you going to {}?",
            "Have you been to {}?",
            "When did you get back from {}?",
        ],
        answers: &[
            "Yes, I leave for {} at {n}.",
            "I was in {} for {n} days.",
            "No, I never go to {}.",
        ],
        replies: &["Take me to {} next time.", "{} sounds nice.", "I miss {} already."],
    },
    Topic {
        values: NAMES,
        questions: &["Have you seen {}?", "Where is {}?", "Did {} call?"],
        answers: &[
            "{} left an hour ago.",
            "No, {} is not here.",
            "Yes, {} called {n} times.",
        ],
        replies: &["Tell {} I'm looking for them.", "I'll wait for {}.", "Typical {}."],
    },
    Topic {
        values: &["tickets", "boxes", "chairs", "cups", "keys", "books"],
        questions: &["How many {} do you need?", "Did you bring the {}?", "Where are the {}?"],
        answers: &["I need {n} {}.", "I brought {n} {}.", "The {} are in the car."],
        replies: &[
            "{n} {}? That's a lot.",
            "Good, we need the {}.",
            "I'll get the {} later.",
        ],
    },
];

const FILLERS: &[&str] = &["Hmm.", "Well.", "Right.", "Oh."];

pub struct Generator {
    rng: Rng,
    continue_prob: f64,
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Generator {
            rng: Rng::new(seed),
            continue_prob: 0.15,
        }
    }

    /// Probability that a speaker adds a second line to a turn.
    pub fn with_continue_prob(mut self, p: f64) -> Self {
        self.continue_prob = p;
        self
    }

    fn pick<'a>(&mut self, xs: &[&'a str]) -> &'a str {
        xs[self.rng.below(xs.len())]
    }

    fn fill(&mut self, template: &str, value: &str) -> String {
        let n = (1 + self.rng.below(60)).to_string();
        let mut s = template.replace("{n}", &n).replace("{}", value);
        // Sentence-initial lowercase values are capitalized like real text.
        if let Some(first) = s.chars().next() {
            if first.is_lowercase() {
                s = first.to_uppercase().chain(s.chars().skip(1)).collect();
            }
        }
        s
    }

    /// One question/answer/reply exchange as raw text.
    pub fn exchange(&mut self) -> [String; 3] {
        let topic = &TOPICS[self.rng.below(TOPICS.len())];
        let value = self.pick(topic.values);
        let qi = self.rng.below(topic.questions.len());
        let q = self.fill(topic.questions[qi], value);
        // The answer template is tied to the question; the reply to the answer.
        let a = self.fill(topic.answers[qi], value);
        let ri = (qi + self.rng.below(2)) % topic.replies.len();
        let r = self.fill(topic.replies[ri], value);
        [q, a, r]
    }

    /// A `Q<TAB>A` pair drawn from the same grammar.
    pub fn qa_pair(&mut self) -> (String, String) {
        let [q, a, _] = self.exchange();
        (q, a)
    }

    pub fn qa_text(&mut self, pairs: usize) -> String {
        let mut out = String::new();
        for _ in 0..pairs {
            let (q, a) = self.qa_pair();
            writeln!(out, "{q}\t{a}").unwrap();
        }
        out
    }

    /// A raw script: `movies` groups, each with `dialogues` dialogues of
    /// `exchanges` consecutive exchanges between two speakers.
    pub fn script(&mut self, movies: usize, dialogues: usize, exchanges: usize) -> String {
        let mut out = String::new();
        for m in 0..movies {
            writeln!(out, "# movie {m}").unwrap();
            for d in 0..dialogues {
                if d > 0 {
                    out.push('\n');
                }
                let a = self.pick(NAMES).to_uppercase();
                let mut b = self.pick(NAMES).to_uppercase();
                while b == a {
                    b = self.pick(NAMES).to_uppercase();
                }
                let mut speaker = 0;
                for _ in 0..exchanges {
                    for line in self.exchange() {
                        let who = if speaker == 0 { &a } else { &b };
                        if self.rng.uniform() < self.continue_prob {
                            let f = self.pick(FILLERS);
                            writeln!(out, "{who}\t{f}").unwrap();
                        }
                        writeln!(out, "{who}\t{line}").unwrap();
                        speaker ^= 1;
                    }
                }
            }
        }
        out
    }
}

/// Names used by the grammar, one per line, for the tokenizer gazetteer.
pub fn gazetteer_text() -> String {
    NAMES.iter().map(|n| format!("{n}\n")).collect()
}
