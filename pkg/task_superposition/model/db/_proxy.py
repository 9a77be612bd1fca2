import peewee as pw

# initialized with the sqlite run ledger of an output directory, see runlog.connect
db_proxy = pw.DatabaseProxy()
