"""
Shared fixtures

fixture databases are built in tmp_path with the benchmark's on-disk layout
<root>/database/<db_id>/<db_id>.sqlite, next to a tables.json catalog and a
train.json examples file.
"""

import json
import os
import sqlite3
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from hypothesis import settings

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

settings.register_profile("ci", deadline=None, print_blob=True)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


CONCERT_DDL = """
CREATE TABLE stadium (
  stadium_id INTEGER PRIMARY KEY,
  name VARCHAR(40) NOT NULL,
  location VARCHAR(40),
  capacity INTEGER
);
CREATE TABLE singer (
  singer_id INTEGER PRIMARY KEY,
  name VARCHAR(40) NOT NULL,
  country VARCHAR(40),
  age INTEGER
);
CREATE TABLE concert (
  concert_id INTEGER PRIMARY KEY,
  concert_name VARCHAR(60),
  stadium_id INTEGER NOT NULL,
  year INTEGER,
  FOREIGN KEY (stadium_id) REFERENCES stadium(stadium_id)
);
CREATE TABLE singer_in_concert (
  concert_id INTEGER NOT NULL,
  singer_id INTEGER NOT NULL,
  FOREIGN KEY (concert_id) REFERENCES concert(concert_id),
  FOREIGN KEY (singer_id) REFERENCES singer(singer_id)
);
INSERT INTO stadium VALUES (1, 'Arena North', 'Leeds', 5000), (2, 'Bay Dome', 'Cardiff', 12000),
  (3, 'City Park', 'York', 800), (4, 'Dock Hall', 'Hull', 2500);
INSERT INTO singer VALUES (1, 'Ana', 'France', 29), (2, 'Ben', 'France', 41), (3, 'Cleo', 'Spain', 35),
  (4, 'Dev', 'India', 52), (5, 'Eli', 'Spain', 23), (6, 'Fay', 'Chile', 38);
INSERT INTO concert VALUES (1, 'Spring Gala', 1, 2014), (2, 'Summer Jam', 2, 2015),
  (3, 'Autumn Nights', 2, 2015), (4, 'Winter Lights', 3, 2016), (5, 'New Year Bash', 1, 2016);
INSERT INTO singer_in_concert VALUES (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4), (4, 1), (5, 2), (5, 5);
"""

# (question, gold SQL, hand-computed score with default weights)
GOLD_CORPUS = [
    # Easy
    ("How many singers are there?", "SELECT count(*) FROM singer", 0),
    ("List the names of singers older than 30.", "SELECT name FROM singer WHERE age > 30", 0),
    ("List singer names from oldest to youngest.", "SELECT name FROM singer ORDER BY age DESC", 1),
    # Medium
    ("How many singers come from each country, most first?",
     "SELECT country, count(*) FROM singer GROUP BY country ORDER BY count(*) DESC", 2),
    ("Which singers have performed in a concert?",
     "SELECT T2.name FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id GROUP BY T2.name", 2),
    ("List concerts with their stadium, by year.",
     "SELECT T1.concert_name, T2.name FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id ORDER BY T1.year", 2),
    ("How many concerts did each stadium host?",
     "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id", 2),
    ("Which stadiums hosted more than one concert?",
     "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id "
     "GROUP BY T1.stadium_id HAVING count(*) > 1", 3),
    ("Which stadiums never hosted a concert?",
     "SELECT name FROM stadium WHERE stadium_id NOT IN (SELECT stadium_id FROM concert) ORDER BY name", 2),
    ("Which years had at least two concerts?",
     "SELECT year, count(*) FROM concert GROUP BY year HAVING count(*) >= 2", 2),
    ("Which singers are older than average, youngest first?",
     "SELECT name FROM singer WHERE age > (SELECT avg(age) FROM singer) ORDER BY age", 2),
    ("Who sang in a 2015 concert?",
     "SELECT T3.name FROM singer_in_concert AS T1 JOIN concert AS T2 ON T1.concert_id = T2.concert_id "
     "JOIN singer AS T3 ON T1.singer_id = T3.singer_id WHERE T2.year = 2015", 2),
    ("Which singers are French or sang in concert 3?",
     "SELECT name FROM singer WHERE country = 'France' UNION SELECT T2.name FROM singer_in_concert AS T1 "
     "JOIN singer AS T2 ON T1.singer_id = T2.singer_id WHERE T1.concert_id = 3", 2),
    ("Where were the 2016 concerts held?",
     "SELECT DISTINCT T1.location FROM stadium AS T1 JOIN concert AS T2 ON T1.stadium_id = T2.stadium_id "
     "WHERE T2.year = 2016 ORDER BY T1.location", 2),
    ("Which concert was held at the largest stadium?",
     "SELECT T1.concert_name FROM concert AS T1, stadium AS T2 WHERE T1.stadium_id = T2.stadium_id "
     "ORDER BY T2.capacity DESC LIMIT 1", 2),
    ("How many concerts has each singer performed in, most first?",
     "SELECT T2.name, count(*) FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id "
     "GROUP BY T2.singer_id ORDER BY count(*) DESC", 3),
    ("Which countries have more than one singer?",
     "SELECT country FROM singer GROUP BY country HAVING count(*) > 1 ORDER BY country", 3),
    ("Which stadiums are larger than average?",
     "SELECT name, capacity FROM stadium WHERE capacity > (SELECT avg(capacity) FROM stadium) ORDER BY capacity DESC", 2),
    # Hard
    ("Which stadiums hosted more than two performances?",
     "SELECT name FROM stadium WHERE stadium_id IN (SELECT T1.stadium_id FROM concert AS T1 JOIN singer_in_concert AS T2 "
     "ON T1.concert_id = T2.concert_id GROUP BY T1.stadium_id HAVING count(*) > 2) ORDER BY name", 5),
    ("How many performances did each singer give?",
     "SELECT T2.name, count(*) FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id "
     "JOIN concert AS T3 ON T1.concert_id = T3.concert_id GROUP BY T2.name ORDER BY count(*) DESC", 4),
    ("Who sang both in 2014 and in 2016?",
     "SELECT T3.name FROM singer_in_concert AS T1 JOIN concert AS T2 ON T1.concert_id = T2.concert_id "
     "JOIN singer AS T3 ON T1.singer_id = T3.singer_id WHERE T2.year = 2014 INTERSECT "
     "SELECT T3.name FROM singer_in_concert AS T1 JOIN concert AS T2 ON T1.concert_id = T2.concert_id "
     "JOIN singer AS T3 ON T1.singer_id = T3.singer_id WHERE T2.year = 2016", 5),
    ("Which singers performed at stadiums holding more than 1000 people?",
     "SELECT name FROM singer WHERE singer_id IN (SELECT T1.singer_id FROM singer_in_concert AS T1 JOIN concert AS T2 "
     "ON T1.concert_id = T2.concert_id WHERE T2.stadium_id IN (SELECT stadium_id FROM stadium WHERE capacity > 1000)) "
     "ORDER BY age", 4),
    ("Which stadiums hosted two or more concerts after 2014, largest first?",
     "SELECT T1.name, T1.capacity FROM stadium AS T1 JOIN concert AS T2 ON T1.stadium_id = T2.stadium_id "
     "WHERE T2.year > 2014 GROUP BY T1.stadium_id HAVING count(*) >= 2 ORDER BY T1.capacity DESC", 4),
    ("What is the average age per country of singers with several performances?",
     "SELECT country, avg(age) FROM singer WHERE singer_id IN (SELECT singer_id FROM singer_in_concert "
     "GROUP BY singer_id HAVING count(*) > 1) GROUP BY country ORDER BY country", 5),
    ("Which concerts had the most singers?",
     "SELECT T1.concert_name FROM concert AS T1 JOIN (SELECT concert_id, count(*) AS n FROM singer_in_concert "
     "GROUP BY concert_id) AS T2 ON T1.concert_id = T2.concert_id WHERE T2.n = (SELECT max(n) FROM "
     "(SELECT count(*) AS n FROM singer_in_concert GROUP BY concert_id))", 6),
    ("Which singers over 30 did not sing in 2015?",
     "SELECT name FROM singer WHERE age > 30 EXCEPT SELECT T2.name FROM singer_in_concert AS T1 "
     "JOIN singer AS T2 ON T1.singer_id = T2.singer_id JOIN concert AS T3 ON T1.concert_id = T3.concert_id "
     "WHERE T3.year = 2015 ORDER BY name", 4),
    ("Which singers performed at stadiums with capacity above 4000?",
     "SELECT T1.name FROM singer AS T1 JOIN singer_in_concert AS T2 ON T1.singer_id = T2.singer_id "
     "JOIN concert AS T3 ON T2.concert_id = T3.concert_id JOIN stadium AS T4 ON T3.stadium_id = T4.stadium_id "
     "WHERE T4.capacity > 4000 GROUP BY T1.name", 4),
    ("Where were concerts held in 2014 or 2015?",
     "SELECT location FROM stadium WHERE stadium_id IN (SELECT stadium_id FROM concert WHERE year = 2015) UNION "
     "SELECT location FROM stadium WHERE stadium_id IN (SELECT stadium_id FROM concert WHERE year = 2014) "
     "ORDER BY location", 4),
    ("Who are the oldest performing singer and the youngest singer?",
     "SELECT name FROM singer WHERE age = (SELECT max(age) FROM singer WHERE singer_id IN "
     "(SELECT singer_id FROM singer_in_concert)) OR age = (SELECT min(age) FROM singer) ORDER BY name", 4),
    ("How many singers did each multi-singer concert have, by year?",
     "SELECT T2.concert_name, count(*) FROM singer_in_concert AS T1 JOIN concert AS T2 ON T1.concert_id = T2.concert_id "
     "JOIN stadium AS T3 ON T2.stadium_id = T3.stadium_id GROUP BY T2.concert_id HAVING count(*) > 1 ORDER BY T2.year", 5),
]

# queries that only need to parse, with hand-computed scores
ORACLE_EXTRA = [
    ("SELECT * FROM t", 0),
    ("SELECT a FROM t JOIN u ON t.id = u.id GROUP BY a", 2),
    ("SELECT a FROM t WHERE a IN (SELECT a FROM u)", 1),
    ("SELECT a FROM t JOIN u ON t.id = u.id GROUP BY a ORDER BY a", 3),
    ("SELECT a FROM t WHERE a IN (SELECT a FROM u JOIN v ON u.id = v.id)", 2),
    ("SELECT a FROM t, u, v WHERE t.id = u.id AND u.id = v.id", 2),
    ("SELECT a FROM t LEFT JOIN u ON t.id = u.id", 1),
    ("SELECT count(*) FROM (SELECT a FROM t GROUP BY a)", 2),
    ("SELECT a, (SELECT max(b) FROM u) FROM t", 1),
    ("SELECT a FROM t UNION SELECT a FROM u UNION SELECT a FROM v", 2),
    ("SELECT a FROM t INTERSECT SELECT a FROM u JOIN v ON u.id = v.id", 2),
    ("SELECT a FROM t GROUP BY a HAVING count(*) > (SELECT avg(c) FROM u)", 3),
    ("SELECT a FROM t WHERE EXISTS (SELECT 1 FROM u WHERE u.a = t.a)", 1),
    ("SELECT a FROM t WHERE a NOT IN (SELECT a FROM u WHERE b IN (SELECT b FROM v))", 2),
    ("SELECT a FROM t ORDER BY a LIMIT 5", 1),
    ("SELECT DISTINCT a FROM t", 0),
    ("SELECT a, count(*) FROM t GROUP BY a ORDER BY count(*) DESC LIMIT 1", 2),
    ("SELECT t.a FROM t JOIN u ON t.id = u.tid JOIN v ON u.id = v.uid JOIN w ON v.id = w.vid", 3),
    ("SELECT a FROM t EXCEPT SELECT a FROM u ORDER BY a", 2),
    ("SELECT a FROM t WHERE b > (SELECT avg(b) FROM t) AND c < (SELECT max(c) FROM u)", 2),
    ("SELECT x.a FROM (SELECT a FROM t JOIN u ON t.id = u.id) AS x JOIN v ON x.a = v.a", 3),
    ("SELECT a FROM t WHERE a IN (SELECT a FROM u UNION SELECT a FROM v)", 2),
    ('SELECT "name" FROM `people` WHERE age > 30', 0),
]

INVOICES_SCHEMA_BLOCK = """Table: Customers
customer_id INTEGER PRIMARY KEY
customer_first_name VARCHAR(50)
customer_middle_initial VARCHAR(1)
customer_last_name VARCHAR(50)
gender VARCHAR(1)
email_address VARCHAR(255)
login_name VARCHAR(80)
login_password VARCHAR(20)
phone_number VARCHAR(255)
town_city VARCHAR(50)
state_county_province VARCHAR(50)
country VARCHAR(50)

Table: Orders
order_id INTEGER PRIMARY KEY
customer_id INTEGER NOT NULL
date_order_placed DATETIME NOT NULL
order_details VARCHAR(255)

Table: Invoices
invoice_number INTEGER PRIMARY KEY
order_id INTEGER NOT NULL
invoice_date DATETIME

Table: Accounts
account_id INTEGER PRIMARY KEY
customer_id INTEGER NOT NULL
date_account_opened DATETIME
account_name VARCHAR(50)
other_account_details VARCHAR(255)

Table: Product_Categories
production_type_code VARCHAR(15) PRIMARY KEY
product_type_description VARCHAR(80)
vat_rating DECIMAL(19,4)

Table: Products
product_id INTEGER PRIMARY KEY
parent_product_id INTEGER
production_type_code VARCHAR(15) NOT NULL
unit_price DECIMAL(19,4)
product_name VARCHAR(80)
product_color VARCHAR(20)
product_size VARCHAR(20)

Table: Financial_Transactions
transaction_id INTEGER NOT NULL
account_id INTEGER NOT NULL
invoice_number INTEGER
transaction_type VARCHAR(15) NOT NULL
transaction_date DATETIME
transaction_amount DECIMAL(19,4)
transaction_comment VARCHAR(255)
other_transaction_details VARCHAR(255)

Table: Order_Items
order_item_id INTEGER PRIMARY KEY
order_id INTEGER NOT NULL
product_id INTEGER NOT NULL
product_quantity VARCHAR(50)
other_order_item_details VARCHAR(255)

Table: Invoice_Line_Items
order_item_id INTEGER NOT NULL
invoice_number INTEGER NOT NULL
product_id INTEGER NOT NULL
product_title VARCHAR(80)
product_quantity VARCHAR(50)
product_price DECIMAL(19,4)
derived_product_cost DECIMAL(19,4)
derived_vat_payable DECIMAL(19,4)
derived_total_cost DECIMAL(19,4)"""

INVOICES_QUESTION = "What are the ids, date opened, name, and other details for all accounts?"
INVOICES_SQL = "SELECT account_id, date_account_opened, account_name, other_account_details FROM Accounts"
INVOICES_REASONING = """To answer the question "What are the ids, date opened, name, and other details for all accounts?", we need to perform the following steps:

1. Identify the target table: The question explicitly asks for information about "accounts". Looking at the schema, the Accounts table is the most relevant table as it stores account-related data.

2. Identify the required columns: The question asks for "ids, date opened, name, and other details".
    * "ids" corresponds to the account_id column in the Accounts table.
    * "date opened" corresponds to the date_account_opened column in the Accounts table.
    * "name" corresponds to the account_name column in the Accounts table.
    * "other details" corresponds to the other_account_details column in the Accounts table.

3. Determine if filtering is needed: The question asks for "all accounts", which implies no specific filtering conditions are required.

4. Determine if joins are needed: All the requested information is available directly within the Accounts table, so no joins with other tables are necessary.

5. Determine if aggregation or ordering is needed: The question does not ask for any summary statistics (like counts, sums, averages) or a specific order for the results, so no aggregation or ordering clauses are needed.

Therefore, the query will simply select the identified columns from the Accounts table."""


def invoices_ddl() -> str:
    """CREATE TABLE statements rebuilt from the schema block (column lines are valid column definitions)"""
    statements = []
    for block in INVOICES_SCHEMA_BLOCK.split("\n\n"):
        lines = block.split("\n")
        name = lines[0][len("Table: "):]
        statements.append(f"CREATE TABLE {name} (\n  " + ",\n  ".join(lines[1:]) + "\n);")
    return "\n".join(statements)


def build_database(path: Path, script: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(path))
    try:
        conn.executescript(script)
        conn.commit()
    finally:
        conn.close()
    return path


CONCERT_CATALOG = {
    "db_id": "concert_singer",
    "table_names_original": ["stadium", "singer", "concert", "singer_in_concert"],
    "table_names": ["stadium", "singer", "concert", "singer in concert"],
    "column_names_original": [
        [-1, "*"],
        [0, "stadium_id"], [0, "name"], [0, "location"], [0, "capacity"],
        [1, "singer_id"], [1, "name"], [1, "country"], [1, "age"],
        [2, "concert_id"], [2, "concert_name"], [2, "stadium_id"], [2, "year"],
        [3, "concert_id"], [3, "singer_id"],
    ],
    "column_names": [
        [-1, "*"],
        [0, "stadium id"], [0, "name"], [0, "location"], [0, "capacity"],
        [1, "singer id"], [1, "name"], [1, "country"], [1, "age"],
        [2, "concert id"], [2, "concert name"], [2, "stadium id"], [2, "year"],
        [3, "concert id"], [3, "singer id"],
    ],
    "column_types": ["text", "number", "text", "text", "number", "number", "text", "text", "number",
                     "number", "text", "number", "number", "number", "number"],
    "primary_keys": [1, 5, 9],
    "foreign_keys": [[11, 1], [13, 9], [14, 5]],
}


@pytest.fixture
def spider_root(tmp_path):
    """
    Benchmark-style directory: both fixture databases, tables.json and train.json
    (the 30-item gold corpus on concert_singer)
    """
    root = tmp_path / "spider"
    build_database(root / "database" / "concert_singer" / "concert_singer.sqlite", CONCERT_DDL)
    build_database(root / "database" / "customers_and_invoices" / "customers_and_invoices.sqlite", invoices_ddl())

    (root / "tables.json").write_text(json.dumps([CONCERT_CATALOG]), encoding="utf-8")
    examples = [{"question": q, "query": sql, "db_id": "concert_singer"} for q, sql, _ in GOLD_CORPUS]
    (root / "train.json").write_text(json.dumps(examples, indent=2), encoding="utf-8")
    return root


@pytest.fixture
def concert_db(spider_root):
    return spider_root / "database" / "concert_singer" / "concert_singer.sqlite"


@pytest.fixture
def invoices_db(spider_root):
    return spider_root / "database" / "customers_and_invoices" / "customers_and_invoices.sqlite"


class StubChatServer:
    """
    In-process chat-completion endpoint

        answers: question -> SQL; replies wrap it in a ```sql fence ("SELECT 1" when unknown)
        script: status codes returned before any success, consumed in order
        delay: seconds each request is held, to make concurrency observable
    """

    def __init__(self, answers=None, script=None, delay=0.0):
        self.answers = dict(answers or {})
        self.script = list(script or [])
        self.delay = delay
        self.questions = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()
        self.server = None
        self.thread = None

    @property
    def request_count(self):
        return len(self.questions)

    @property
    def base_url(self):
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def reply(self, payload):
        user = payload["messages"][-1]["content"]
        question = user.rsplit("Question: ", 1)[-1]
        with self.lock:
            self.questions.append(question)
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            status = self.script.pop(0) if self.script else 200
        try:
            if self.delay:
                time.sleep(self.delay)
            sql = self.answers.get(question, "SELECT 1")
            return status, {"choices": [{"message": {"role": "assistant", "content": f"```sql\n{sql}\n```"}}]}
        finally:
            with self.lock:
                self.in_flight -= 1

    def start(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                status, payload = stub.reply(json.loads(body))
                data = json.dumps(payload if status == 200 else {"error": "try again"}).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return self

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    """factory: stub_server(answers=..., script=..., delay=...) returns a running StubChatServer"""
    started = []

    def start(**kwargs):
        server = StubChatServer(**kwargs).start()
        started.append(server)
        return server

    yield start
    for server in started:
        server.stop()
