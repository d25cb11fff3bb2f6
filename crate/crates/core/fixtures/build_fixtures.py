#!/usr/bin/env python3
"""Regenerate the committed fixture databases, task file and scripted trie.

Run from this directory: python3 build_fixtures.py
"""
import json
import os
import sqlite3


def build_db(name):
    path = f"{name}.sqlite"
    if os.path.exists(path):
        os.remove(path)
    conn = sqlite3.connect(path)
    with open(f"{name}.sql") as f:
        conn.executescript(f.read())
    conn.commit()
    conn.close()


def build_empty():
    if os.path.exists("empty.sqlite"):
        os.remove("empty.sqlite")
    conn = sqlite3.connect("empty.sqlite")
    # force a header page so the file is a valid zero-table database
    conn.execute("PRAGMA user_version = 1")
    conn.commit()
    conn.close()


# (id, question, gold, branches); each branch is a list of (fragment, logprob)
TASKS = [
    ("t01", "How many singers are there?", "SELECT count(*) FROM singer", [
        [("SELECT count(*) ", -0.05), ("FROM singer;", -0.02)],
        [("SELECT count(*) ", -0.05), ("FROM concert;", -2.0)],
        [("SELECT count(singer_id) ", -1.2), ("FROM singer;", -0.1)],
        [("SELECT name ", -2.5), ("FROM singer;", -0.1)],
    ]),
    ("t02", "What are the names of singers from France?",
     "SELECT name FROM singer WHERE country = 'France'", [
        [("SELECT country ", -0.3), ("FROM singer ", -0.05), ("WHERE country = 'France';", -0.1)],
        [("SELECT name ", -0.7), ("FROM singer ", -0.05), ("WHERE country = 'France';", -0.1)],
        [("SELECT name ", -0.7), ("FROM singer ", -0.05), ("WHERE country = 'france';", -1.5)],
        [("SELECT singer_id ", -1.9), ("FROM singer ", -0.05), ("WHERE country = 'France';", -0.1)],
    ]),
    ("t03", "Show the names of stadiums with capacity above 50000.",
     "SELECT name FROM stadium WHERE capacity > 50000", [
        [("SELECT name ", -0.1), ("FROM stadium ", -0.05), ("WHERE capacity < 50000;", -0.2)],
        [("SELECT name ", -0.1), ("FROM stadium ", -0.05), ("WHERE capacity > 50000;", -0.6)],
    ]),
    ("t04", "What is the average age of all singers?", "SELECT avg(age) FROM singer", [
        [("SELECT avg(age) ", -0.1), ("FROM singer;", -0.05)],
        [("SELECT max(age) ", -1.8), ("FROM singer;", -0.05)],
        [("SELECT sum(age) ", -2.4), ("FROM singer;", -0.05)],
    ]),
    ("t05", "List the names of concerts held in 2014.",
     "SELECT concert_name FROM concert WHERE year = 2014", [
        [("SELECT concert_name ", -0.1), ("FROM concert ", -0.05), ("WHERE year = 2014;", -0.1)],
        [("SELECT concert_name ", -0.1), ("FROM concert ", -0.05), ("WHERE year = 2015;", -1.1)],
    ]),
    ("t06", "List singer names ordered by age from oldest to youngest.",
     "SELECT name FROM singer ORDER BY age DESC", [
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("ORDER BY age DESC;", -0.2)],
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("ORDER BY age ASC;", -0.9)],
    ]),
    ("t07", "How many concerts were held at each stadium?",
     "SELECT stadium_id, count(*) FROM concert GROUP BY stadium_id", [
        [("SELECT stadium_id, count(*) ", -0.2), ("FROM concert ", -0.05), ("GROUP BY stadium_id;", -0.1)],
        [("SELECT stadium_id, count(*) ", -0.2), ("FROM concert ", -0.05), ("GROUP BY;", -1.0)],
        [("SELECT stadium_id ", -1.4), ("FROM concert ", -0.05), ("GROUP BY stadium_id;", -0.1)],
    ]),
    ("t08", "What are the names of stadiums that hosted concerts in 2015?",
     "SELECT T2.name FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id WHERE T1.year = 2015", [
        [("SELECT T2.name ", -0.2), ("FROM concert AS T1 ", -0.1), ("JOIN stadium AS T2 ", -0.05),
         ("ON T1.stadium_id = T2.stadium_id ", -0.05), ("WHERE T1.year = 2015;", -0.1)],
        [("SELECT T1.concert_name ", -1.5), ("FROM concert AS T1 ", -0.1), ("WHERE T1.year = 2015;", -0.1)],
    ]),
    ("t09", "What is the name of the oldest singer?",
     "SELECT name FROM singer ORDER BY age DESC LIMIT 1", [
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("ORDER BY age DESC ", -0.2), ("LIMIT 1;", -0.05)],
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("ORDER BY age ASC ", -1.0), ("LIMIT 1;", -0.05)],
    ]),
    ("t10", "Which singers from the USA are older than 30?",
     "SELECT name FROM singer WHERE age > 30 AND country = 'USA'", [
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("WHERE age > 30 ", -0.2), ("AND country = 'France';", -0.3)],
        [("SELECT name ", -0.1), ("FROM singer ", -0.05), ("WHERE age > 30 ", -0.2), ("AND country = 'USA';", -0.5)],
    ]),
]


def build_trie(branches):
    trie = {}
    for branch in branches:
        prefix = ""
        for text, lp in branch:
            entries = trie.setdefault(prefix, [])
            found = [e for e in entries if e["text"] == text]
            if found:
                assert found[0]["logprob"] == lp, (prefix, text)
            else:
                entries.append({"text": text, "logprob": lp})
            prefix += text
    return trie


# Queries for the PSG corpus. Several hide boundary keywords inside
# literals, quoted identifiers or comments, where no cut may land.
PSG_QUERIES = [
"SELECT count(*) FROM singer",
"SELECT name FROM singer WHERE country = 'France'",
"SELECT name, age FROM singer ORDER BY age DESC",
"SELECT name FROM stadium WHERE capacity > 50000",
"SELECT avg(age) FROM singer",
"SELECT max(capacity), min(capacity) FROM stadium",
"SELECT country, count(*) FROM singer GROUP BY country",
"SELECT country FROM singer GROUP BY country HAVING count(*) > 1",
"SELECT name FROM singer ORDER BY age LIMIT 3",
"SELECT concert_name FROM concert WHERE year = 2014",
"SELECT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id",
"SELECT T2.concert_name FROM stadium AS T1 JOIN concert AS T2 ON T1.stadium_id = T2.stadium_id WHERE T1.capacity > 60000",
"SELECT name FROM singer WHERE age > 30 AND country = 'France'",
"SELECT name FROM singer WHERE age < 25 OR country = 'Netherlands'",
"SELECT name FROM singer WHERE singer_id IN (SELECT singer_id FROM concert WHERE year = 2015)",
"SELECT name FROM stadium WHERE stadium_id NOT IN (SELECT stadium_id FROM concert)",
"SELECT name FROM singer WHERE country = 'France' UNION SELECT name FROM singer WHERE age > 40",
"SELECT singer_id FROM singer INTERSECT SELECT singer_id FROM concert",
"SELECT stadium_id FROM stadium EXCEPT SELECT stadium_id FROM concert",
"SELECT name FROM singer WHERE name = 'Where Order From'",
"SELECT 'SELECT FROM WHERE' FROM singer",
"SELECT name FROM singer WHERE name LIKE '%and%'",
"SELECT \"name\" FROM \"singer\" WHERE \"age\" >= 30",
"SELECT [name] FROM [stadium] ORDER BY [capacity]",
"SELECT `name` FROM `singer` LIMIT 1",
"SELECT name FROM singer -- WHERE age > 1\nWHERE age > 20",
"SELECT name /* FROM nothing */ FROM singer",
"select name from singer where age > 30",
"Select Name From Singer Order By Age",
"SELECT count(DISTINCT country) FROM singer",
"SELECT T1.name, count(*) FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id GROUP BY T1.singer_id",
"SELECT T1.name FROM stadium AS T1 JOIN concert AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id ORDER BY count(*) DESC LIMIT 1",
"SELECT name FROM singer WHERE age = (SELECT max(age) FROM singer)",
"SELECT name FROM stadium WHERE capacity > (SELECT avg(capacity) FROM stadium)",
"SELECT year, count(*) FROM concert GROUP BY year ORDER BY year",
"SELECT name FROM singer WHERE age BETWEEN 25 AND 35",
"SELECT location FROM stadium WHERE name != 'Anfield' ORDER BY location ASC",
"SELECT sum(capacity) FROM stadium WHERE location = 'Paris' OR location = 'Glasgow'",
"SELECT name FROM singer WHERE country IS NOT NULL ORDER BY name LIMIT 2 OFFSET 1",
"SELECT s.name FROM singer s JOIN concert c ON s.singer_id = c.singer_id JOIN stadium st ON c.stadium_id = st.stadium_id WHERE st.location = 'Liverpool'",
"SELECT name FROM singer WHERE EXISTS (SELECT 1 FROM concert WHERE concert.singer_id = singer.singer_id)",
"SELECT CASE WHEN age > 30 THEN 'old' ELSE 'young' END FROM singer",
"SELECT name, age * 2 FROM singer WHERE age % 2 = 0",
"SELECT concert_name FROM concert WHERE concert_name = 'It''s Union Night'",
"SELECT name FROM singer WHERE name IN ('Joe Sharp', 'Timbaland') AND age > 10",
"SELECT T1.country FROM singer AS T1 LEFT JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.concert_id IS NULL",
"SELECT location, avg(capacity) FROM stadium GROUP BY location HAVING avg(capacity) > 1000",
"SELECT name FROM singer ORDER BY age DESC, name ASC LIMIT 5;",
"SELECT count(*) FROM concert WHERE year > 2013 AND year < 2016 GROUP BY stadium_id HAVING count(*) >= 1 ORDER BY count(*)",
"  SELECT name FROM singer WHERE age > 18",
]


def build_psg_corpus():
    assert len(PSG_QUERIES) == 50
    conn = sqlite3.connect("music.sqlite")
    for q in PSG_QUERIES:
        conn.execute(q).fetchall()
    conn.close()
    corpus = [
        {"id": f"p{i:02}", "question": f"PSG corpus query {i}", "db_id": "music", "query": q}
        for i, q in enumerate(PSG_QUERIES, start=1)
    ]
    with open("psg_corpus.json", "w") as f:
        json.dump(corpus, f, indent=2)
        f.write("\n")


def main():
    build_db("concerts")
    build_db("music")
    build_empty()
    tasks = [{"id": i, "question": q, "db_id": "music", "query": g} for i, q, g, _ in TASKS]
    with open("tasks.json", "w") as f:
        json.dump(tasks, f, indent=2)
        f.write("\n")
    scopes = [{"match": q, "trie": build_trie(b)} for _, q, _, b in TASKS]
    with open("trie.json", "w") as f:
        json.dump({"scopes": scopes}, f, indent=2)
        f.write("\n")
    build_psg_corpus()


if __name__ == "__main__":
    main()
