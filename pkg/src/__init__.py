# RFID voting – src package
