"""Regenerate the bundled corpora, datasets and mock scripts under src/ekarag/data/fixtures/.

Texts are transcribed from the two published case-study trajectories; the
multi-hop family is a small hand-written corpus.
"""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "ekarag" / "data" / "fixtures"

CASE_DOCS = [
    ("they_met_in_argentina", "They Met in Argentina",
     "They Met in Argentina is a 1941 American film directed by Leslie Goodwins and Jack Hively for RKO Pictures."),
    ("leslie_goodwins", "Leslie Goodwins",
     "Leslie Goodwins (17 September 1899 -- 8 January 1969) was an English film director and screenwriter."),
    ("with_love_and_kisses", "With Love and Kisses",
     "With Love and Kisses is a 1936 American musical comedy film directed by Leslie Goodwins and starring Pinky Tomlin, Toby Wing and Kane Richmond."),
    ("ill_tell_the_world", "I'll Tell the World",
     "I'll Tell the World is a 1945 American comedy film directed by Leslie Goodwins and written by Henry Blankfort and Lester Pine."),
    ("mexican_spitfires_baby", "The Mexican Spitfire's Baby",
     "The Mexican Spitfire's Baby is a 1941 American comedy film directed by Leslie Goodwins."),
    ("murder_in_the_blue_room", "Murder in the Blue Room",
     "Murder in the Blue Room is a 1944 American film directed by Leslie Goodwins. It is the second remake of the 1933 American Pre-Code murder-mystery film 'Secret of the Blue Room.'"),
    ("gil_portes", "Gil Portes",
     "Gil M. Portes (September 13, 1945 -- May 24, 2017) was a Filipino film director, film producer and screenwriter."),
    ("saturday_night_1950", "Saturday Night (1950 film)",
     "Saturday Night (1950 film) is a 1950 Spanish drama film directed by Rafael Gil."),
    ("man_who_wanted_to_kill_himself", "The Man Who Wanted to Kill Himself (1970 film)",
     "The Man Who Wanted to Kill Himself (1970 film)"),
    ("carlos_gardel", "Carlos Gardel",
     "Carlos Gardel (born Charles Romuald Gardès; 11 December 1890 -- 24 June 1935) was a French Argentine singer, songwriter, composer and actor."),
    ("rafael_gil", "Rafael Gil", "Rafael Gil was a Spanish film director and screenwriter."),
    ("the_autonomines", "The Autonomines",
     "The Autonomines is a Spanish comedy film directed by Rafael Gil and starring Alfredo Landa, María Casanova, and Manolo Codeso."),
    ("gil_franco_era", "Rafael Gil (career)", "Gil was a prominent director of the Franco era."),
    ("el_canto_del_gallo", "El canto del gallo",
     "El canto del gallo is a 1955 Spanish drama film directed by Rafael Gil."),
    ("la_noche_del_sabado", "La noche del sábado",
     "Gil's film 'La noche del sábado' was nominated for the Gold Lion at the 1950 Venice Film Festival."),
    ("saranggola", "Saranggola",
     "Saranggola (international title: The Kite) is a 1999 Filipino drama film directed by Gil Portes, starring Ricky Davao, Lester Llansang and Jennifer Sevilla."),
    ("lena_dunham", "Lena Dunham",
     "Lena Dunham (born May 13, 1986) is an American actress, writer, director, and producer."),
    ("priyadarshan", "Priyadarshan",
     "Priyadarshan (born January 30, 1957) is an Indian film director, producer, and screenwriter."),
    ("vs_raghavan", "V. S. Raghavan", "V. S. Raghavan (director)"),
]

Q_EKA = "Which film has the director born later, I'll Tell The World or Saranggola?"
Q_BASE = "Which film has the director born later, I'Ll Tell The World or Saranggola?"

EKA_TURNS = [
    ("I'll Tell the World is a 1945 American comedy film directed by Leslie Goodwins",
     "<think>From the knowledge provided, I'll Tell The World is a 1945 American comedy film directed by Leslie Goodwins. "
     "Saranggola is a 1999 Filipino drama film directed by Gil Portes. To determine which film has the director born later, "
     "I will need to find the birth years of Leslie Goodwins and Gil Portes.</think>\n"
     '<query>{ "type": "search", "query": "Leslie Goodwins birth year" }</query>'),
    ("Leslie Goodwins (17 September 1899 -- 8 January 1969)",
     "\n<think>From the knowledge provided, Leslie Goodwins was born on September 17, 1899. Now I need to find the birth year "
     "of Gil Portes to determine which film has the director born later.</think>\n"
     '<query>{"type": "search", "query": "Gil Portes birth year"}</query>'),
    ("Gil M. Portes (September 13, 1945 -- May 24, 2017)",
     "\n<think>From the knowledge provided, Leslie Goodwins was born on September 17, 1899. Gil Portes was born on September 13, "
     "1945. Now I can compare the birth years to determine which film has the director born later.</think>\n"
     "<answer>Saranggola</answer>"),
]

BAD_QUERY = """SELECT directorBirthYear WHERE movieName = "I'Ll Tell The World" OR movieName = "Saranggola\""""

BASE_TURNS = [
    ("Question: " + Q_BASE,
     "<think>To answer this question, I need to find information about the birth years of the directors of the movies "
     "I'Ll Tell The World and Saranggola, then compare them.</think>\n"
     f"<query>{BAD_QUERY}</query>"),
    ("Invalid tool call format.",
     "\n<think>The previous query did not work as expected, so I'll try a different approach. First, I need to get the birth "
     "years of the directors of both movies.</think>\n"
     f"<query>{BAD_QUERY}</query>"),
    ("</query><knowledge>Invalid tool call format. Please use <query>{ \"query\": \"statement\" }</query> format.</knowledge>\n<think>The previous",
     "\n<think>Given the error in my previous attempts, I'll directly query for the birth years of the directors of "
     "I'Ll Tell The World and Saranggola, and then compare them.</think>\n"
     "<query>{ \"query\": \"SELECT directorBirthYear WHERE movieName = 'I'Ll Tell The World' OR movieName = 'Saranggola'\" }</query>"),
    ("I'll directly query for the birth years",
     "\n<think>I found the birth years of the directors of both movies. Lena Dunham is the director of I'Ll Tell The World "
     "and was born in 1986. While V. S. Raghavan is the director of Saranggola and was born in 1935. Since Lena Dunham's "
     "birth year is later than V. S. Raghavan, the film I'Ll Tell The World has the director born later.</think>\n"
     "<answer>I'Ll Tell The World</answer>"),
]

GOLD_CONTEXT = " ".join(text for did, _, text in CASE_DOCS
                        if did in ("ill_tell_the_world", "saranggola", "leslie_goodwins", "gil_portes"))

MULTIHOP_DOCS = [
    ("ill_tell_the_world", "I'll Tell the World", CASE_DOCS[3][2]),
    ("saranggola", "Saranggola", CASE_DOCS[15][2]),
    ("leslie_goodwins", "Leslie Goodwins", CASE_DOCS[1][2]),
    ("gil_portes", "Gil Portes", CASE_DOCS[6][2]),
    ("they_met_in_argentina", "They Met in Argentina", CASE_DOCS[0][2]),
    ("rafael_gil", "Rafael Gil", CASE_DOCS[10][2]),
    ("el_canto_del_gallo", "El canto del gallo", CASE_DOCS[13][2]),
    ("the_hobbit", "The Hobbit",
     "The Hobbit is a children's fantasy novel written by J. R. R. Tolkien and published in 1937."),
    ("dune", "Dune", "Dune is a 1965 epic science fiction novel written by Frank Herbert."),
    ("tolkien", "J. R. R. Tolkien",
     "John Ronald Reuel Tolkien (3 January 1892 -- 2 September 1973) was an English writer, poet and philologist."),
    ("frank_herbert", "Frank Herbert",
     "Franklin Patrick Herbert Jr. (October 8, 1920 -- February 11, 1986) was an American science fiction author."),
    ("lord_of_the_rings", "The Lord of the Rings",
     "The Lord of the Rings is an epic high fantasy novel by the English author and scholar J. R. R. Tolkien."),
    ("eiffel_tower", "Eiffel Tower",
     "The Eiffel Tower is a wrought-iron lattice tower on the Champ de Mars in Paris, France."),
    ("paris", "Paris", "Paris is the capital and most populous city of France."),
    ("statue_of_liberty", "Statue of Liberty",
     "The Statue of Liberty is a colossal neoclassical sculpture on Liberty Island in New York Harbor."),
    ("model_t", "Ford Model T",
     "The Ford Model T is an automobile that was produced by Ford Motor Company from 1908 to 1927."),
    ("ford_motor_company", "Ford Motor Company",
     "Ford Motor Company is an American automobile manufacturer founded by Henry Ford in 1903."),
    ("henry_ford", "Henry Ford",
     "Henry Ford (July 30, 1863 -- April 7, 1947) was an American industrialist and business magnate."),
    ("volkswagen_beetle", "Volkswagen Beetle",
     "The Volkswagen Beetle is a small family car manufactured by Volkswagen from 1938 until 2003."),
]

MULTIHOP_QUESTIONS = [
    {
        "question": Q_EKA,
        "golden_answers": ["Saranggola"],
        "distractor": "I'll Tell The World",
        "hops": [
            {"query": "I'll Tell the World film director", "evidence": "1945 American comedy film directed by Leslie Goodwins"},
            {"query": "Saranggola film director", "evidence": "1999 Filipino drama film directed by Gil Portes"},
            {"query": "Leslie Goodwins birth date", "evidence": "17 September 1899"},
            {"query": "Gil Portes birth date", "evidence": "September 13, 1945"},
        ],
    },
    {
        "question": "Who was born first, the writer of The Hobbit or the writer of Dune?",
        "golden_answers": ["J. R. R. Tolkien", "Tolkien"],
        "distractor": "Frank Herbert",
        "hops": [
            {"query": "The Hobbit novel writer", "evidence": "fantasy novel written by J. R. R. Tolkien"},
            {"query": "Dune novel writer", "evidence": "novel written by Frank Herbert"},
            {"query": "John Ronald Reuel Tolkien", "evidence": "3 January 1892"},
            {"query": "Franklin Patrick Herbert", "evidence": "October 8, 1920"},
        ],
    },
    {
        "question": "What is the capital of the country where the Eiffel Tower stands?",
        "golden_answers": ["Paris"],
        "distractor": "Lyon",
        "hops": [
            {"query": "Eiffel Tower location", "evidence": "lattice tower on the Champ de Mars in Paris, France"},
            {"query": "capital of France", "evidence": "capital and most populous city of France"},
        ],
    },
    {
        "question": "In what year was the founder of the maker of the Model T born?",
        "golden_answers": ["1863"],
        "distractor": "1903",
        "hops": [
            {"query": "Model T manufacturer", "evidence": "produced by Ford Motor Company"},
            {"query": "Ford Motor Company founder", "evidence": "founded by Henry Ford"},
            {"query": "Henry Ford born", "evidence": "July 30, 1863"},
        ],
    },
]


def _docs_jsonl(docs):
    return "".join(json.dumps({"id": i, "title": t, "text": x}, ensure_ascii=False) + "\n" for i, t, x in docs)


def _script(question, turns, concentration):
    lines = []
    for i, (expect, emit) in enumerate(turns):
        rec = {"question": question, "expect_substring": expect, "emit": emit,
               "synthetic_top": {"n": 5, "seed": 100 * (i + 1), "concentration": concentration}}
        lines.append(json.dumps(rec, ensure_ascii=False) + "\n")
    return "".join(lines)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "case_study_corpus.jsonl").write_text(_docs_jsonl(CASE_DOCS), encoding="utf-8")
    (OUT / "case_study_script.jsonl").write_text(
        _script(Q_EKA, EKA_TURNS, 0.3) + _script(Q_BASE, BASE_TURNS, 1.0), encoding="utf-8")
    case = [
        {"question": Q_EKA, "golden_answers": ["Saranggola"], "gold_context": GOLD_CONTEXT},
        {"question": Q_BASE, "golden_answers": ["Saranggola"], "gold_context": GOLD_CONTEXT},
    ]
    (OUT / "case_study.jsonl").write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in case), encoding="utf-8")
    (OUT / "multihop_corpus.jsonl").write_text(_docs_jsonl(MULTIHOP_DOCS), encoding="utf-8")
    for q in MULTIHOP_QUESTIONS:
        q["gold_context"] = " ".join(
            text for _, _, text in MULTIHOP_DOCS if any(h["evidence"] in text for h in q["hops"]))
    (OUT / "multihop.jsonl").write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in MULTIHOP_QUESTIONS), encoding="utf-8")
    print(sorted(p.name for p in OUT.iterdir()))


if __name__ == "__main__":
    main()
