//! Template-generated dialog corpora and synthetic users.
//!
//! Every speaker has a persona: peaked preferences over the words of each
//! slot category and a handful of invented names only they use. Because
//! several words share each initial letter, an abbreviation alone is
//! ambiguous across speakers but largely predictable for one speaker — which
//! is exactly what personalization has to exploit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ingest::CORNELL_SEPARATOR;
use super::{AbbrevExample, Source};
use crate::error::{CoreError, Result};
use crate::text::is_punct;

const PERSON: &[&str] = &[
    "mike", "mary", "mark", "maria", "sam", "sarah", "steve", "sophie", "john", "jane", "jack",
    "julia", "tom", "tina", "tony", "tara", "bob", "ben", "beth", "bella", "lisa", "lucy", "leo",
    "laura", "nick", "nora", "nate", "nina", "kate", "kevin", "karen", "kyle", "george", "gina",
    "grace", "greg", "paul", "peter", "pam", "penny", "rachel", "robert", "rose", "ryan", "dave",
    "diana", "dan", "donna", "chris", "carol", "carl", "cindy", "amy", "alex", "anna", "adam",
    "emma", "eric", "ella", "evan", "helen", "henry", "hannah", "harry", "will", "wendy", "wade",
    "walter",
];

const FAMILY: &[&str] = &[
    "mom", "mommy", "mother", "dad", "daddy", "doctor", "grandma", "grandpa", "guy", "sister",
    "son", "sweetheart", "brother", "buddy", "baby", "nurse", "neighbor", "nephew", "wife",
    "husband", "honey", "aunt", "uncle", "cousin", "friend", "father", "family",
];

const FOOD: &[&str] = &[
    "pizza", "pasta", "pie", "pancakes", "soup", "salad", "sandwich", "sushi", "chicken", "cake",
    "cookies", "carrots", "burgers", "bread", "beans", "bagels", "rice", "ramen", "ribs", "toast",
    "tacos", "tuna", "eggs", "apples", "oatmeal", "noodles", "fries", "fish", "fruit", "muffins",
    "meatloaf", "mangoes", "grapes", "granola", "waffles", "watermelon", "lasagna", "lemons",
    "dumplings", "donuts", "hummus", "ham", "yogurt", "cheese", "crackers", "peaches",
];

const DRINK: &[&str] = &[
    "water", "wine", "tea", "juice", "coffee", "cocoa", "cola", "milk", "soda", "smoothie",
    "lemonade", "beer", "broth", "cider", "punch", "milkshake",
];

const PLACE: &[&str] = &[
    "park", "pool", "pharmacy", "post office", "store", "school", "station", "church", "clinic",
    "cafe", "library", "lake", "beach", "bank", "bakery", "gym", "garden", "garage", "mall",
    "market", "movies", "kitchen", "bedroom", "bathroom", "office", "hospital", "hall", "hotel",
    "theater", "temple", "dentist", "diner", "river", "restaurant", "zoo", "farm", "field",
    "airport", "apartment",
];

const OBJECT: &[&str] = &[
    "phone", "pillow", "pills", "blanket", "book", "brush", "glasses", "gloves", "remote",
    "radio", "wheelchair", "watch", "towel", "tablet", "tissues", "cup", "charger", "coat",
    "keys", "kindle", "shoes", "socks", "scarf", "jacket", "jeans", "hat", "headphones",
    "laptop", "lotion", "medicine", "mask", "notebook", "newspaper", "umbrella", "fan", "feeding tube",
];

const ACTIVITY: &[&str] = &[
    "reading", "running", "resting", "swimming", "singing", "shopping", "sleeping", "cooking",
    "cleaning", "camping", "walking", "watching tv", "writing", "painting", "praying", "playing cards",
    "dancing", "drawing", "gardening", "golfing", "baking", "biking", "knitting", "fishing",
    "hiking", "traveling", "texting", "listening to music", "laughing", "learning",
];

const TIME: &[&str] = &[
    "today", "tonight", "tomorrow", "this morning", "this afternoon", "this evening", "later",
    "now", "next week", "next month", "soon", "sunday", "saturday", "monday", "friday",
    "after lunch", "after dinner", "before bed", "every day", "in a bit",
];

const FEELING: &[&str] = &[
    "tired", "thirsty", "terrible", "hungry", "happy", "hot", "sad", "sick", "sore", "sleepy",
    "cold", "cranky", "great", "good", "grumpy", "better", "bored", "fine", "fantastic", "awful",
    "anxious", "okay", "lonely", "lucky", "worried", "weak", "dizzy", "nervous",
];

/// Opposites used as a deliberately mismatched prompt initialization.
const ANTONYMS: &[(&str, &str)] = &[
    ("tired", "rested"),
    ("thirsty", "quenched"),
    ("hungry", "full"),
    ("happy", "sad"),
    ("sad", "happy"),
    ("hot", "cold"),
    ("cold", "hot"),
    ("sick", "healthy"),
    ("good", "bad"),
    ("great", "awful"),
    ("better", "worse"),
    ("bored", "excited"),
    ("today", "yesterday"),
    ("tonight", "morning"),
    ("tomorrow", "yesterday"),
    ("now", "never"),
    ("soon", "late"),
    ("later", "earlier"),
    ("lonely", "together"),
    ("weak", "strong"),
];

const TEMPLATES: &[&str] = &[
    "can you bring me my {object}",
    "can you bring me my {object} from the {place}",
    "please hand me the {object}",
    "where did you put my {object} ?",
    "i left my {object} at the {place}",
    "i want to eat {food} {time}",
    "i would like {food} and {drink}",
    "could i have some {drink} please",
    "let's have {food} for dinner",
    "can we order {food} {time} ?",
    "i'm in the mood for {food}",
    "please call {person}",
    "please call {person} {time}",
    "tell {person} i said hi",
    "{person} is coming over {time}",
    "did {person} go to the {place} ?",
    "i miss {person} so much",
    "thank you so much , {person}",
    "can you ask {person} to help me",
    "when is {person} coming back ?",
    "let's go to the {place} with {person}",
    "let's go to the {place} {time}",
    "i need to go to the {place}",
    "we should go {activity} {time}",
    "i love {activity} with {person}",
    "i feel like {activity} {time}",
    "i am feeling {feeling} {time}",
    "i feel {feeling} , can you help",
    "i'm so {feeling} right now",
    "my {family} is coming {time}",
    "ask my {family} to call me",
    "i want to see my {family}",
    "my {family} made {food}",
    "good morning , {person} !",
    "good night {person} , love you",
    "is it time for {activity} ?",
    "i don't want {food} {time}",
    "{person} and {person} are here",
    "could you turn on the {object}",
    "i'm {feeling} , i need some {drink}",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ri", "zu", "ven", "tor", "bel", "qua", "xi", "dor", "fen", "gal", "hin",
    "jas", "mor", "nel", "pim", "rus", "sol", "tam", "vik", "wen", "yor", "zan", "bri", "cal",
    "dru", "eli", "fa", "gor", "ilo", "jun", "kes", "lum", "nok", "oba", "pel", "quin", "sar",
    "tuv", "uri", "vos", "wil", "yen", "zor", "ax", "bo", "cy",
];

/// Slot categories with their word pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Person,
    Family,
    Food,
    Drink,
    Place,
    Object,
    Activity,
    Time,
    Feeling,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Person,
        Category::Family,
        Category::Food,
        Category::Drink,
        Category::Place,
        Category::Object,
        Category::Activity,
        Category::Time,
        Category::Feeling,
    ];

    fn from_slot(s: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.slot() == s)
    }

    fn slot(self) -> &'static str {
        match self {
            Category::Person => "person",
            Category::Family => "family",
            Category::Food => "food",
            Category::Drink => "drink",
            Category::Place => "place",
            Category::Object => "object",
            Category::Activity => "activity",
            Category::Time => "time",
            Category::Feeling => "feeling",
        }
    }

    pub fn pool(self) -> &'static [&'static str] {
        match self {
            Category::Person => PERSON,
            Category::Family => FAMILY,
            Category::Food => FOOD,
            Category::Drink => DRINK,
            Category::Place => PLACE,
            Category::Object => OBJECT,
            Category::Activity => ACTIVITY,
            Category::Time => TIME,
            Category::Feeling => FEELING,
        }
    }
}

/// Knobs of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaParams {
    /// Favorite words per category.
    pub favorites: usize,
    /// Probability a slot is filled from the favorites.
    pub favorite_rate: f64,
    /// Invented names per speaker.
    pub own_names: usize,
    /// Probability a person slot uses one of the speaker's own names.
    pub own_name_rate: f64,
    /// Templates a speaker uses most.
    pub favorite_templates: usize,
    pub favorite_template_rate: f64,
}

impl Default for PersonaParams {
    fn default() -> Self {
        Self {
            favorites: 5,
            favorite_rate: 0.85,
            own_names: 3,
            own_name_rate: 0.6,
            favorite_templates: 12,
            favorite_template_rate: 0.7,
        }
    }
}

/// One speaker's habits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub favorites: BTreeMap<Category, Vec<String>>,
    pub own_names: Vec<String>,
    pub templates: Vec<usize>,
    pub params: PersonaParams,
}

fn invent_name<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn pool_words() -> HashSet<&'static str> {
    Category::ALL
        .iter()
        .flat_map(|c| c.pool().iter().flat_map(|w| w.split(' ')))
        .collect()
}

impl Persona {
    /// Draws a persona whose invented names avoid `taken` and every pool or
    /// template word.
    pub fn random<R: Rng>(id: &str, params: PersonaParams, taken: &mut HashSet<String>, rng: &mut R) -> Self {
        let reserved = pool_words();
        let template_words: HashSet<&str> = TEMPLATES
            .iter()
            .flat_map(|t| t.split(' '))
            .filter(|w| !w.starts_with('{'))
            .collect();
        let favorites = Category::ALL
            .iter()
            .map(|&c| {
                let picked: Vec<String> = c
                    .pool()
                    .choose_multiple(rng, params.favorites.min(c.pool().len()))
                    .map(|s| s.to_string())
                    .collect();
                (c, picked)
            })
            .collect();
        let mut own_names = Vec::new();
        while own_names.len() < params.own_names {
            let name = invent_name(rng);
            if !reserved.contains(name.as_str())
                && !template_words.contains(name.as_str())
                && taken.insert(name.clone())
            {
                own_names.push(name);
            }
        }
        let templates = (0..TEMPLATES.len())
            .collect::<Vec<_>>()
            .choose_multiple(rng, params.favorite_templates.min(TEMPLATES.len()))
            .copied()
            .collect();
        Self {
            id: id.to_string(),
            favorites,
            own_names,
            templates,
            params,
        }
    }

    fn fill<R: Rng>(&self, cat: Category, rng: &mut R) -> (String, bool) {
        if cat == Category::Person && !self.own_names.is_empty() && rng.gen_bool(self.params.own_name_rate) {
            return (self.own_names.choose(rng).expect("non-empty").clone(), true);
        }
        let proper = cat == Category::Person;
        let favs = &self.favorites[&cat];
        if !favs.is_empty() && rng.gen_bool(self.params.favorite_rate) {
            // Earlier favorites are preferred: weights 1, 1/2, 1/3, ...
            let w: Vec<f64> = (1..=favs.len()).map(|i| 1.0 / i as f64).collect();
            let total: f64 = w.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            for (word, wi) in favs.iter().zip(&w) {
                if x < *wi {
                    return (word.clone(), proper);
                }
                x -= wi;
            }
            return (favs[favs.len() - 1].clone(), proper);
        }
        (cat.pool().choose(rng).expect("non-empty").to_string(), proper)
    }

    /// One sentence and the number of proper-noun tokens in it.
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> (String, usize) {
        let t = if !self.templates.is_empty() && rng.gen_bool(self.params.favorite_template_rate) {
            *self.templates.choose(rng).expect("non-empty")
        } else {
            rng.gen_range(0..TEMPLATES.len())
        };
        let mut proper = 0;
        let words: Vec<String> = TEMPLATES[t]
            .split(' ')
            .map(|w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(slot) => {
                    let cat = Category::from_slot(slot).expect("template slots are categories");
                    let (word, is_proper) = self.fill(cat, rng);
                    proper += usize::from(is_proper);
                    word
                }
                None => w.to_string(),
            })
            .collect();
        (words.join(" "), proper)
    }
}

/// Multi-speaker dialog corpus.
#[derive(Clone, Debug)]
pub struct DialogCorpus {
    pub examples: Vec<AbbrevExample>,
    pub personas: Vec<Persona>,
}

impl DialogCorpus {
    /// Every word token in the corpus.
    pub fn vocabulary(&self) -> HashSet<String> {
        corpus_vocabulary(&self.examples)
    }
}

/// Word types of a set of examples (expansions and contexts).
pub fn corpus_vocabulary(examples: &[AbbrevExample]) -> HashSet<String> {
    examples
        .iter()
        .flat_map(|e| {
            e.expansion
                .split(' ')
                .chain(e.context.iter().flat_map(|c| c.split(' ')))
        })
        .filter(|w| !w.is_empty() && !w.chars().all(is_punct))
        .map(str::to_string)
        .collect()
}

/// Two-party conversations among `n_speakers` personas, `utterances` total.
/// Each utterance's context is the previous turn of its conversation.
pub fn dialog_corpus(seed: u64, n_speakers: usize, utterances: usize, params: &PersonaParams) -> DialogCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let personas: Vec<Persona> = (0..n_speakers.max(2))
        .map(|i| Persona::random(&format!("spk{i:04}"), params.clone(), &mut taken, &mut rng))
        .collect();
    let mut examples = Vec::with_capacity(utterances);
    while examples.len() < utterances {
        let a = rng.gen_range(0..personas.len());
        let mut b = rng.gen_range(0..personas.len() - 1);
        if b >= a {
            b += 1;
        }
        let turns = rng.gen_range(2..=8);
        let mut context: Option<String> = None;
        for turn in 0..turns {
            if examples.len() >= utterances {
                break;
            }
            let p = &personas[if turn % 2 == 0 { a } else { b }];
            let (text, _) = p.sentence(&mut rng);
            let ex = AbbrevExample::from_text(
                &text,
                context.as_deref(),
                examples.len() as u64,
                &p.id,
                Source::DialogCorpus,
            )
            .expect("templates produce non-empty text");
            context = Some(ex.expansion.clone());
            examples.push(ex);
        }
    }
    DialogCorpus { examples, personas }
}

/// A personalization target with invented proper nouns.
#[derive(Clone, Debug)]
pub struct SyntheticUser {
    pub persona: Persona,
    pub examples: Vec<AbbrevExample>,
    /// Invented nouns absent from the base corpus.
    pub novel_nouns: Vec<String>,
    /// Characteristic words: the novel nouns, then top favorites.
    pub concepts: Vec<String>,
    /// A contrasting word for each concept.
    pub antonyms: Vec<String>,
    /// Fraction of word tokens that are proper nouns.
    pub proper_noun_rate: f64,
}

/// Maximum attempts at drawing a novel noun before giving up.
pub const NOVEL_NOUN_RETRIES: usize = 10_000;

/// Generates a user whose invented names never occur in `base_vocab`.
///
/// With `novel_noun_count == 0` the user only draws words that the base
/// corpus already contains.
pub fn make_synthetic_user(
    seed: u64,
    n_sentences: usize,
    novel_noun_count: usize,
    base_vocab: &HashSet<String>,
    params: &PersonaParams,
) -> Result<SyntheticUser> {
    if n_sentences < 50 {
        return Err(CoreError::InvalidArgument("a synthetic user needs at least 50 sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0005_E125);
    let mut taken: HashSet<String> = base_vocab.clone();
    let mut persona = Persona::random(
        "synthetic-user",
        PersonaParams {
            own_names: 0,
            ..params.clone()
        },
        &mut taken,
        &mut rng,
    );
    let mut novel = Vec::with_capacity(novel_noun_count);
    let mut attempts = 0;
    while novel.len() < novel_noun_count {
        attempts += 1;
        if attempts > NOVEL_NOUN_RETRIES {
            return Err(CoreError::InvalidArgument(format!(
                "could not find {novel_noun_count} nouns absent from the base corpus"
            )));
        }
        let name = invent_name(&mut rng);
        if !base_vocab.contains(&name) && !pool_words().contains(name.as_str()) && taken.insert(name.clone()) {
            novel.push(name);
        }
    }
    persona.own_names = novel.clone();
    // Restrict ordinary slot fillers to words the base corpus knows, so that
    // the only unseen words are the invented ones.
    let known = |w: &str| w.split(' ').all(|p| base_vocab.contains(p));
    for favs in persona.favorites.values_mut() {
        favs.retain(|w| known(w));
    }
    let mut examples = Vec::with_capacity(n_sentences);
    let mut proper = 0usize;
    let mut tokens = 0usize;
    while examples.len() < n_sentences {
        let (text, p) = persona.sentence(&mut rng);
        if text
            .split(' ')
            .any(|w| !w.chars().all(is_punct) && !base_vocab.contains(w) && !novel.iter().any(|n| n == w))
        {
            continue;
        }
        proper += p;
        tokens += text.split(' ').filter(|w| !w.chars().all(is_punct)).count();
        examples.push(
            AbbrevExample::from_text(&text, None, examples.len() as u64, &persona.id, Source::SyntheticUser)
                .expect("non-empty"),
        );
    }
    let mut concepts = novel.clone();
    for cat in [Category::Food, Category::Place, Category::Activity, Category::Object, Category::Drink] {
        concepts.extend(persona.favorites[&cat].iter().take(2).cloned());
    }
    let antonyms = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| contrast(c, &persona, i))
        .collect();
    Ok(SyntheticUser {
        persona,
        examples,
        novel_nouns: novel,
        concepts,
        antonyms,
        proper_noun_rate: proper as f64 / tokens.max(1) as f64,
    })
}

/// A true antonym when one is listed, otherwise a same-category word the
/// persona does not favor (for names: a common name).
fn contrast(word: &str, persona: &Persona, salt: usize) -> String {
    if let Some((_, a)) = ANTONYMS.iter().find(|(w, _)| *w == word) {
        return a.to_string();
    }
    let cat = Category::ALL
        .into_iter()
        .find(|c| c.pool().contains(&word))
        .unwrap_or(Category::Person);
    let favs = &persona.favorites[&cat];
    let others: Vec<&&str> = cat.pool().iter().filter(|w| !favs.iter().any(|f| f == **w)).collect();
    others[salt % others.len()].to_string()
}

/// Brute-force check that no `nouns` entry occurs as a word of `corpus`.
pub fn nouns_absent(nouns: &[String], corpus: &[AbbrevExample]) -> bool {
    corpus.iter().all(|e| {
        e.expansion
            .split(' ')
            .chain(e.context.iter().flat_map(|c| c.split(' ')))
            .all(|w| !nouns.iter().any(|n| n == w))
    })
}

/// Movie-line fixture in the Cornell separator format: `n_characters`
/// characters spread over a few movies, with line counts drawn from
/// `count_range`.
pub fn movie_lines(seed: u64, n_characters: usize, count_range: (usize, usize), params: &PersonaParams) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let mut out = String::new();
    let mut line_id = 0usize;
    let mut plan: Vec<(usize, Persona, usize)> = (0..n_characters)
        .map(|i| {
            let p = Persona::random(&format!("u{i}"), params.clone(), &mut taken, &mut rng);
            let n = rng.gen_range(count_range.0..=count_range.1);
            (i, p, n)
        })
        .collect();
    let total: usize = plan.iter().map(|(_, _, n)| n).sum();
    for _ in 0..total {
        let open: Vec<usize> = (0..plan.len()).filter(|&i| plan[i].2 > 0).collect();
        let k = *open.choose(&mut rng).expect("lines remain");
        let (i, persona, left) = &mut plan[k];
        *left -= 1;
        let (text, _) = persona.sentence(&mut rng);
        let _ = writeln!(
            out,
            "L{line_id}{sep}u{i}{sep}m{}{sep}CHAR{i}{sep}{text}",
            *i / 3,
            sep = CORNELL_SEPARATOR
        );
        line_id += 1;
    }
    out
}

/// Per-speaker example counts, for summaries.
pub fn speaker_counts(examples: &[AbbrevExample]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for e in examples {
        *m.entry(e.speaker_id.clone()).or_insert(0) += 1;
    }
    m
}
