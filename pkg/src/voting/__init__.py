# RFID voting – library modules, imported by bare name with src/voting on sys.path
